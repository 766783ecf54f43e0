import json

import pytest

from cramfuse.cli import (
    CSV_COLUMNS,
    ExperimentConfig,
    apply_overrides,
    cmd_ablate_hparams,
    cmd_ablate_threshold,
    cmd_robustness,
    cmd_run,
    cmd_synth,
    cmd_train,
    load_config,
    main,
    parse_value,
    read_csv,
    write_csv,
)
from cramfuse.config import ConfigError
from cramfuse.dataset import load_dataset

TINY_TRAIN = {"steps": 40, "stage1_steps": 20}


@pytest.fixture(scope="module")
def datasets(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    cmd_synth(5, 4, root / "train")
    cmd_synth(6, 2, root / "test")
    return root


@pytest.fixture(scope="module")
def model(datasets):
    cfg = ExperimentConfig(train_dataset=str(datasets / "train"), out_dir=str(datasets / "m"), train=TINY_TRAIN, seed=0)
    return cmd_train(cfg)


def test_parse_and_override():
    assert parse_value("0.3") == 0.3 and parse_value("true") is True and parse_value("abc") == "abc"
    data = apply_overrides({"pipeline": {"tau": 0.15}}, ["pipeline.tau=0.3", "train.steps=5", "mode=radar_only"])
    assert data == {"pipeline": {"tau": 0.3}, "train": {"steps": 5}, "mode": "radar_only"}
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])


def test_config_validation(tmp_path, monkeypatch):
    for bad in ({"mode": "lidar"}, {"dropout_location": "x"}, {"taus": [0.0]}, {"pipeline": {"tau": 2.0}},
                {"train": {"bogus": 1}}, {"workers": 0}):
        with pytest.raises(ConfigError):
            ExperimentConfig(**bad)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"nope": 1})
    cfg = ExperimentConfig(attention=False, dropout=False)
    assert not cfg.pipeline_config().attention and cfg.pipeline_config().p_drop == 0.0
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    monkeypatch.setenv("CRAMFUSE_SEED", "17")
    assert ExperimentConfig().resolved_seed == 17 and ExperimentConfig().train_config().seed == 17
    assert ExperimentConfig(seed=3).resolved_seed == 3
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"mode": "camera_only", "pipeline": {"tau": 0.2}}))
    cfg = load_config(path, ["pipeline.tau=0.4"])
    assert cfg.mode == "camera_only" and cfg.pipeline_config().tau == 0.4


def test_csv_round_trip(tmp_path):
    rows = [{"sigma": 0.1, "ap_dropout": 0.5, "ap_no_dropout": 0.25, "gap": 0.25}]
    path = write_csv(tmp_path / "r.csv", "robustness", rows)
    assert path.read_text().splitlines()[0] == ",".join(CSV_COLUMNS["robustness"])
    assert read_csv(path) == [{k: repr(v) for k, v in rows[0].items()}]


def test_synth_empty_and_deterministic(tmp_path):
    cmd_synth(1, 0, tmp_path / "e")
    assert load_dataset(tmp_path / "e") == []
    cmd_synth(9, 2, tmp_path / "a")
    cmd_synth(9, 2, tmp_path / "b")
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert len(load_dataset(tmp_path / "a")) == 2


def test_run_is_byte_identical(datasets, model, tmp_path):
    outs = []
    for k in range(2):
        cfg = ExperimentConfig(dataset=str(datasets / "test"), model=str(model), out_dir=str(tmp_path / f"r{k}"))
        res = cmd_run(cfg)
        assert 0.0 <= res["ap"] <= 1.0
        outs.append([(tmp_path / f"r{k}" / n).read_bytes() for n in ("detections.json", "eval.csv")])
    assert outs[0] == outs[1]
    header = (tmp_path / "r0" / "eval.csv").read_text().splitlines()[0]
    assert header == ",".join(CSV_COLUMNS["eval"])


def test_threshold_sweep_antitone(datasets, model, tmp_path):
    cfg = ExperimentConfig(dataset=str(datasets / "test"), model=str(model), out_dir=str(tmp_path))
    rows = cmd_ablate_threshold(cfg, [0.9, 0.15, 1 - 1e-6, 0.5])
    assert [r["tau"] for r in rows] == [0.15, 0.5, 0.9, 1 - 1e-6]
    counts = [r["num_points"] for r in rows]
    assert all(a >= b for a, b in zip(counts, counts[1:])) and counts[-1] == 0
    assert (tmp_path / "threshold.svg").read_text().lstrip().startswith("<?xml")


def test_hparams_single_point(datasets, tmp_path):
    cfg = ExperimentConfig(dataset=str(datasets / "test"), train_dataset=str(datasets / "train"), out_dir=str(tmp_path),
                           train={"steps": 5, "stage1_steps": 5}, grid_modality_code=[False])
    rows = cmd_ablate_hparams(cfg)
    assert len(rows) == 1 and rows[0]["modality_code"] is False
    assert len(read_csv(tmp_path / "hparams.csv")) == 1


def test_robustness_needs_models(datasets, model, tmp_path):
    cfg = ExperimentConfig(dataset=str(datasets / "test"), model=str(model), out_dir=str(tmp_path))
    with pytest.raises(ConfigError):
        cmd_robustness(cfg, [0.0])
    cfg = ExperimentConfig(dataset=str(datasets / "test"), model=str(model), model_no_dropout=str(model),
                           out_dir=str(tmp_path))
    rows = cmd_robustness(cfg, [0.0])
    assert rows[0]["gap"] == 0.0


def test_main_errors_and_synth(tmp_path, capsys):
    assert main(["run", "--set", f"dataset={tmp_path / 'missing'}"]) == 2
    assert "error:" in capsys.readouterr().err
    assert main(["run", "--set", "mode=lidar"]) == 2
    assert main(["synth", "--out", str(tmp_path / "d"), "--set", "n_scenes=1", "--set", "seed=2"]) == 0
    assert len(load_dataset(tmp_path / "d")) == 1
    with pytest.raises(SystemExit):
        main(["bogus"])
