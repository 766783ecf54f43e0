"""Batch experiment runner.

Every verb reads an optional JSON config (``--config``) whose keys mirror
:class:`ExperimentConfig`; ``--set key=value`` overrides any key, with dotted
keys reaching into ``pipeline`` and ``train`` (``--set pipeline.tau=0.3``).
Values are parsed as JSON when possible and kept as strings otherwise.

Outputs land in ``out_dir``. CSV schemas are fixed (see ``CSV_COLUMNS``) and
every SVG is drawn from its CSV alone. Columns named ``latency_*`` are the
only nondeterministic outputs.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import DROPOUT_LOCATIONS, ConfigError, PipelineConfig, TrainConfig
from .dataset import load_dataset, save_dataset
from .learner import load_heads, save_heads
from .metrics import latency_probe
from .pipeline import MODES, detect_frame, evaluate, train_model
from .scene_synth import make_dataset

log = logging.getLogger(__name__)

CSV_COLUMNS = {
    "eval": ["category", "iou_thresh", "bucket", "ap"],
    "threshold": ["tau", "num_points", "ap", "latency_median_ms"],
    "fusion": ["attention", "dropout", "ap"],
    "rf": ["t", "num_points", "radar_points", "ap"],
    "robustness": ["sigma", "ap_dropout", "ap_no_dropout", "gap"],
    "hparams": ["epsilon", "s", "p_drop", "modality_code", "ap"],
    "trace": ["stage", "step", "loss"],
}

DEFAULT_TAUS = (0.05, 0.1, 0.15, 0.3, 0.5, 0.7, 0.9, 1 - 1e-6)
DEFAULT_RF = (0.0, 0.1, 0.25, 0.4, 0.5, 0.6, 1.0)
DEFAULT_SIGMAS = (0.0, 0.05, 0.1, 0.2, 0.4)


@dataclass
class ExperimentConfig:
    """One experiment; JSON files use exactly these keys.

    ``pipeline`` and ``train`` hold overrides for :class:`PipelineConfig`
    and :class:`TrainConfig`. ``attention`` and ``dropout`` take precedence
    over the matching pipeline keys (dropout off sets ``p_drop`` to 0).
    ``seed`` None falls back to ``$CRAMFUSE_SEED``, then 0; it seeds both
    data synthesis and head initialization.
    """

    mode: str = "fusion"
    attention: bool = True
    dropout: bool = True
    dropout_location: str = "point_feature"
    pipeline: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    dataset: str | None = None          # evaluation frames
    train_dataset: str | None = None    # training frames (when no model is given)
    model: str | None = None            # trained heads; robustness: dropout-trained model
    model_no_dropout: str | None = None  # robustness only
    seed: int | None = None
    out_dir: str = "out"
    n_scenes: int = 50
    camera_sigma: float = 0.0
    rf_threshold: float = 0.0
    taus: list = field(default_factory=lambda: list(DEFAULT_TAUS))
    rf_thresholds: list = field(default_factory=lambda: list(DEFAULT_RF))
    sigmas: list = field(default_factory=lambda: list(DEFAULT_SIGMAS))
    grid_epsilon: list = field(default_factory=lambda: [0.1])
    grid_s: list = field(default_factory=lambda: [1])
    grid_p_drop: list = field(default_factory=lambda: [0.2])
    grid_modality_code: list = field(default_factory=lambda: [True, False])
    workers: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.dropout_location not in DROPOUT_LOCATIONS:
            raise ConfigError(f"unknown dropout location {self.dropout_location!r}")
        if self.n_scenes < 0:
            raise ConfigError("n_scenes must be >= 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        for t in self.taus:
            if not 0.0 < t < 1.0:
                raise ConfigError(f"taus must lie in (0, 1), got {t}")
        # fail early on bad overrides
        self.pipeline_config()
        self.train_config()

    @property
    def resolved_seed(self) -> int:
        if self.seed is not None:
            return int(self.seed)
        return int(os.environ.get("CRAMFUSE_SEED", 0))

    def pipeline_config(self) -> PipelineConfig:
        base = PipelineConfig.from_dict(self.pipeline)
        return base.replace(
            attention=bool(self.attention),
            p_drop=base.p_drop if self.dropout else 0.0,
            dropout_location=self.dropout_location,
        )

    def train_config(self) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = set(self.train) - names
        if unknown:
            raise ConfigError(f"unknown train keys {sorted(unknown)}")
        cfg = TrainConfig(**self.train)
        if "seed" not in self.train:
            cfg = cfg.replace(seed=self.resolved_seed)
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**data)


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, assignments) -> dict:
    """Apply ``key=value`` strings to a config dict (dotted keys nest)."""
    data = json.loads(json.dumps(data))
    for item in assignments or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key!r}: {p!r} is not a section")
        node[parts[-1]] = parse_value(value)
    return data


def load_config(path=None, assignments=()) -> ExperimentConfig:
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return ExperimentConfig.from_dict(apply_overrides(data, assignments))


# ------------------------------------------------------------------ outputs


def write_csv(path, kind: str, rows) -> Path:
    """Rows are dicts; floats are written with repr for exact round-trips."""
    cols = CSV_COLUMNS[kind]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_cell(r[c]) for c in cols])
    path = Path(path)
    path.write_text(buf.getvalue())
    return path


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def plot_csv(csv_path, svg_path, x: str, ys, xlabel=None, ylabel="AP") -> Path:
    """Line plot of columns ``ys`` against ``x``, reading only the CSV."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_csv(csv_path)
    xs = [float(r[x]) for r in rows]
    with matplotlib.rc_context({"svg.hashsalt": "cramfuse", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for y in ys:
            ax.plot(xs, [float(r[y]) for r in rows], marker="o", label=y)
        ax.set_xlabel(xlabel or x)
        ax.set_ylabel(ylabel)
        if len(ys) > 1:
            ax.legend()
        fig.tight_layout()
        fig.savefig(svg_path, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)
    return Path(svg_path)


def _dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ----------------------------------------------------------------- helpers


def _require_dir(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"{what} path is not set")
    p = Path(path)
    if not (p / "index.json").exists():
        raise FileNotFoundError(f"{what} {p} does not exist")
    return p


def _require_file(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"{what} path is not set")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} {p} does not exist")
    return p


def _train(cfg: ExperimentConfig, pcfg: PipelineConfig | None = None):
    samples = load_dataset(_require_dir(cfg.train_dataset, "training dataset"))
    return train_model(samples, pcfg or cfg.pipeline_config(), cfg.mode, cfg.train_config())


def _heads(cfg: ExperimentConfig):
    """Heads from ``cfg.model`` if given, else trained on ``cfg.train_dataset``."""
    if cfg.model is not None:
        heads, meta = load_heads(_require_file(cfg.model, "model"))
        if meta.get("mode", cfg.mode) != cfg.mode:
            raise ConfigError(f"model was trained for mode {meta['mode']!r}, config asks for {cfg.mode!r}")
        return heads
    return _train(cfg).heads


def _ap(result) -> float:
    return float(result.ap.get(("vehicle", 0.5, "all"), 0.0))


def _eval_rows(result) -> list[dict]:
    rows = []
    for (cat, t, bucket), ap in sorted(result.ap.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2])):
        rows.append({"category": cat, "iou_thresh": float(t), "bucket": bucket, "ap": float(ap)})
    return rows


def _map(fn, items, workers: int):
    """Ordered map, optionally over a process pool."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# -------------------------------------------------------------------- verbs


def cmd_synth(seed: int, n_scenes: int, out) -> Path:
    """Write ``n_scenes`` synthetic frames generated from ``seed``."""
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from None
    save_dataset(make_dataset(seed, n_scenes), out)
    return out


def cmd_train(cfg: ExperimentConfig) -> Path:
    """Train heads on ``train_dataset``; writes model.crmh and trace.csv."""
    out = _out(cfg)
    model = _train(cfg)
    path = out / "model.crmh"
    save_heads(path, model.heads, {"mode": cfg.mode, "pipeline": model.config.to_dict()})
    rows = [{"stage": "2d", "step": i, "loss": float(v)} for i, v in enumerate(model.trace_stage12)]
    rows += [{"stage": "det", "step": i, "loss": float(v)} for i, v in enumerate(model.trace_stage3)]
    write_csv(out / "trace.csv", "trace", rows)
    return path


def cmd_run(cfg: ExperimentConfig) -> dict:
    """Detect on ``dataset`` and write detections.json and eval.csv."""
    samples = load_dataset(_require_dir(cfg.dataset, "dataset"))
    out = _out(cfg)
    heads = _heads(cfg)
    pcfg = cfg.pipeline_config()
    result, dets = evaluate(heads, samples, pcfg, cfg.mode, cfg.camera_sigma, cfg.rf_threshold)
    frames = [
        {"seed": int(s.seed), "num_points": d.num_points, "boxes": [b.to_dict() for b in d.boxes]}
        for s, d in zip(samples, dets)
    ]
    _dump_json(out / "detections.json", {"mode": cfg.mode, "frames": frames})
    write_csv(out / "eval.csv", "eval", _eval_rows(result))
    return {"ap": _ap(result), "result": result, "detections": dets}


def cmd_ablate_threshold(cfg: ExperimentConfig, taus=None) -> list[dict]:
    """Sweep the stage 1 threshold with fixed heads; latency runs serially."""
    taus = sorted(float(t) for t in (taus if taus is not None else cfg.taus))
    samples = load_dataset(_require_dir(cfg.dataset, "dataset"))
    out = _out(cfg)
    heads = _heads(cfg)
    base = cfg.pipeline_config()
    rows = []
    for tau in taus:
        pcfg = base.replace(tau=tau)
        result, dets = evaluate(heads, samples, pcfg, cfg.mode, cfg.camera_sigma, cfg.rf_threshold)
        probe = latency_probe(lambda: detect_frame(heads, samples[0], pcfg, cfg.mode), runs=5)
        rows.append({
            "tau": tau,
            "num_points": int(sum(d.num_points for d in dets)),
            "ap": _ap(result),
            "latency_median_ms": round(probe["median_ms"], 3),
        })
    path = write_csv(out / "threshold.csv", "threshold", rows)
    plot_csv(path, out / "threshold.svg", "tau", ["ap"], xlabel="foreground threshold")
    return rows


def _fusion_point(args):
    cfg, attention, dropout = args
    c = dataclasses.replace(cfg, attention=attention, dropout=dropout, model=None)
    model = _train(c)
    samples = load_dataset(_require_dir(cfg.dataset, "dataset"))
    result, _ = evaluate(model.heads, samples, c.pipeline_config(), c.mode, c.camera_sigma, c.rf_threshold)
    return {"attention": attention, "dropout": dropout, "ap": _ap(result)}


def cmd_ablate_fusion(cfg: ExperimentConfig) -> list[dict]:
    """Four trainings, {attention, dropout} on/off, same data and seeds."""
    _require_dir(cfg.dataset, "dataset")
    out = _out(cfg)
    grid = [(cfg, a, d) for a in (False, True) for d in (False, True)]
    rows = _map(_fusion_point, grid, cfg.workers)
    write_csv(out / "fusion.csv", "fusion", rows)
    return rows


def cmd_ablate_rf_threshold(cfg: ExperimentConfig, t_list=None) -> list[dict]:
    """Evaluate fixed heads with radar cells at or below ``t`` zeroed."""
    ts = sorted(float(t) for t in (t_list if t_list is not None else cfg.rf_thresholds))
    samples = load_dataset(_require_dir(cfg.dataset, "dataset"))
    out = _out(cfg)
    heads = _heads(cfg)
    pcfg = cfg.pipeline_config()
    rows = []
    for t in ts:
        result, dets = evaluate(heads, samples, pcfg, cfg.mode, cfg.camera_sigma, t)
        radar = sum(int(np.count_nonzero(s.frame.radar_rf > t)) for s in samples)
        rows.append({
            "t": t,
            "num_points": int(sum(d.num_points for d in dets)),
            "radar_points": radar,
            "ap": _ap(result),
        })
    path = write_csv(out / "rf.csv", "rf", rows)
    plot_csv(path, out / "rf.svg", "t", ["ap"], xlabel="RF intensity threshold")
    return rows


def cmd_robustness(cfg: ExperimentConfig, sigmas=None) -> list[dict]:
    """Paired camera-noise sweep of a dropout-trained and a plain model."""
    sigmas = sorted(float(s) for s in (sigmas if sigmas is not None else cfg.sigmas))
    samples = load_dataset(_require_dir(cfg.dataset, "dataset"))
    with_drop, _ = load_heads(_require_file(cfg.model, "dropout-trained model"))
    without, _ = load_heads(_require_file(cfg.model_no_dropout, "non-dropout model"))
    out = _out(cfg)
    pcfg = cfg.pipeline_config()
    rows = []
    for sigma in sigmas:
        a, _ = evaluate(with_drop, samples, pcfg, cfg.mode, sigma, cfg.rf_threshold)
        b, _ = evaluate(without, samples, pcfg, cfg.mode, sigma, cfg.rf_threshold)
        rows.append({"sigma": sigma, "ap_dropout": _ap(a), "ap_no_dropout": _ap(b), "gap": _ap(a) - _ap(b)})
    path = write_csv(out / "robustness.csv", "robustness", rows)
    plot_csv(path, out / "robustness.svg", "sigma", ["ap_dropout", "ap_no_dropout"], xlabel="camera noise sigma")
    return rows


def _hparam_point(args):
    cfg, eps, s, p, code = args
    pipeline = {**cfg.pipeline, "epsilon": eps, "s": s, "p_drop": p, "modality_code": code}
    c = dataclasses.replace(cfg, pipeline=pipeline, dropout=p > 0, model=None)
    model = _train(c)
    samples = load_dataset(_require_dir(cfg.dataset, "dataset"))
    result, _ = evaluate(model.heads, samples, c.pipeline_config(), c.mode, c.camera_sigma, c.rf_threshold)
    return {"epsilon": eps, "s": s, "p_drop": p, "modality_code": code, "ap": _ap(result)}


def cmd_ablate_hparams(cfg: ExperimentConfig) -> list[dict]:
    """Cartesian grid over epsilon, s, p_drop and the modality code."""
    _require_dir(cfg.dataset, "dataset")
    out = _out(cfg)
    grid = sorted(itertools.product(
        map(float, cfg.grid_epsilon), map(int, cfg.grid_s), map(float, cfg.grid_p_drop), map(bool, cfg.grid_modality_code)
    ))
    rows = _map(_hparam_point, [(cfg, *g) for g in grid], cfg.workers)
    write_csv(out / "hparams.csv", "hparams", rows)
    return rows


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cramfuse", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in ("synth", "run", "train", "ablate-threshold", "ablate-fusion", "ablate-rf", "robustness", "ablate-hparams"):
        p = sub.add_parser(verb)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        if verb == "synth":
            p.add_argument("--out", required=True, help="dataset directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        cfg = load_config(args.config, args.set)
        if args.verb == "synth":
            path = cmd_synth(cfg.resolved_seed, cfg.n_scenes, args.out)
            print(f"wrote {cfg.n_scenes} frames to {path}")
        elif args.verb == "train":
            print(f"wrote {cmd_train(cfg)}")
        elif args.verb == "run":
            print(f"BEV AP@0.5 {cmd_run(cfg)['ap']:.4f}")
        else:
            fn = {
                "ablate-threshold": cmd_ablate_threshold,
                "ablate-fusion": cmd_ablate_fusion,
                "ablate-rf": cmd_ablate_rf_threshold,
                "robustness": cmd_robustness,
                "ablate-hparams": cmd_ablate_hparams,
            }[args.verb]
            for row in fn(cfg):
                print(json.dumps(row, sort_keys=True))
    except (ConfigError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
