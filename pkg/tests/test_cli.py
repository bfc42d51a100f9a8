from __future__ import annotations

import json

import jsonschema
import numpy as np
import pytest
import yaml

from encoderlab.cli import SUBCOMMANDS, build_parser, load_clips, load_shapes, run
from encoderlab.config import DEFAULTS, config_hash, derive_seed, load_config, set_dotted
from encoderlab.probes import PROBE_RESULT_SCHEMA
from helpers import PIPELINE, TOY_CONFIG, run_stage, run_toy_pipeline


@pytest.fixture(scope="module")
def toy_runs(tmp_path_factory):
    return run_toy_pipeline(tmp_path_factory.mktemp("toy"))


# -------------------------------------------------------------- config


def test_dotted_overrides_parse_yaml():
    cfg = load_config(overrides=["pretrain.lr=1e-3", "probe.tasks=[knn]", "seed=7"])
    assert cfg["pretrain"]["lr"] == 1e-3 and cfg["probe"]["tasks"] == ["knn"] and cfg["seed"] == 7
    assert DEFAULTS["pretrain"]["lr"] == 2e-3  # defaults untouched


def test_bad_overrides():
    with pytest.raises(KeyError):
        set_dotted(load_config(), "pretrain.nope=1")
    with pytest.raises(KeyError):
        set_dotted(load_config(), "nope.lr=1")
    with pytest.raises(ValueError):
        set_dotted(load_config(), "pretrain.lr")


def test_seed_flag_wins_and_hash_tracks_config():
    a, b = load_config(seed=3), load_config(seed=4)
    assert a["seed"] == 3 and config_hash(a) != config_hash(b)
    assert config_hash(load_config(seed=3)) == config_hash(a)


def test_derived_seed_documented_hash():
    import hashlib

    assert derive_seed(0, "pretrain") == int(hashlib.sha256(b"0:pretrain").hexdigest()[:8], 16)
    assert derive_seed(0, "pretrain") != derive_seed(0, "distill")
    assert derive_seed(0, "pretrain") != derive_seed(1, "pretrain")


def test_unknown_config_section(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("bogus: {a: 1}\n")
    with pytest.raises(KeyError):
        load_config(p)


# ------------------------------------------------------------- argument layer


def test_every_subcommand_parses():
    parser = build_parser()
    for name in SUBCOMMANDS:
        args = parser.parse_args([name, "--set", "seed=1", "--seed", "2", "--out-dir", "x", "--device", "cpu"])
        assert args.cmd == name and args.overrides == ["seed=1"] and args.seed == 2


def test_unknown_subcommand_exits_nonzero():
    with pytest.raises(SystemExit) as e:
        run(["train-everything"])
    assert e.value.code != 0


def test_malformed_config_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("pretrain: [unclosed\n")
    code, _ = run(["gen-data", "--config", str(p), "--out-dir", str(tmp_path)])
    assert code == 2
    code, _ = run(["gen-data", "--set", "pretrain.nope=1", "--out-dir", str(tmp_path)])
    assert code == 2


def test_missing_checkpoint_exit_code(tmp_path, toy_runs):
    code, _ = run(["probe", "--config", TOY_CONFIG, "--out-dir", str(tmp_path), "--data", str(toy_runs["gen-data"]),
                   "--checkpoint", str(tmp_path / "nope.npz")])
    assert code == 4


# ------------------------------------------------------------------ pipeline


def test_run_dirs_hold_resolved_config(toy_runs):
    expect = load_config(TOY_CONFIG, seed=0)
    for stage in PIPELINE:
        d = toy_runs[stage]
        assert d.name.startswith(f"{stage}-{config_hash(expect)}-")
        assert yaml.safe_load((d / "config.yaml").read_text()) == expect
        assert (d / "summary.json").exists()


def test_gen_data_layouts(toy_runs):
    d = toy_runs["gen-data"]
    train = load_shapes(d / "shapes_train.npz")
    clips = load_clips(d / "clips_train.npz")
    assert len(train) == 160 and len(clips) == 24
    held = {tuple(p) for p in json.loads((d / "heldout_pairs.json").read_text())}
    assert not {(o.color, o.shape) for objs in train.objects for o in objs} & held
    assert (d / "retrieval" / "pairs.tsv").exists() and (d / "prompts.txt").exists()
    assert any((d / "zeroshot_heldout").iterdir()) and any((d / "clips_eval").iterdir())


def test_probe_results_validate(toy_runs):
    d = toy_runs["probe"]
    files = sorted(d.glob("probe_*.json"))
    assert {f.stem for f in files} == {f"probe_{t}" for t in DEFAULTS["probe"]["tasks"]}
    for f in files:
        doc = json.loads(f.read_text())
        jsonschema.validate(doc, PROBE_RESULT_SCHEMA)
        assert doc["model_id"] == "aligned" and set(doc["per_layer"]) == {"1", "2"}


def test_metrics_are_jsonl(toy_runs):
    for stage in ("pretrain", "distill", "video-ft", "spatial-align", "probe", "zeroshot", "viz"):
        lines = (toy_runs[stage] / "metrics.jsonl").read_text().splitlines()
        assert lines and all(isinstance(json.loads(ln), dict) for ln in lines)


def test_zeroshot_and_viz_outputs(toy_runs):
    z = toy_runs["zeroshot"]
    heldout = json.loads((z / "zeroshot_heldout.json").read_text())
    assert heldout["benchmark"] == "zeroshot_heldout" and heldout["top1"] >= max(heldout["center_crop"],
                                                                                 heldout["squash"])
    assert {"i2t_R@1", "t2i_R@1"} <= set(json.loads((z / "retrieval.json").read_text()))
    pngs = sorted(toy_runs["viz"].glob("layer2_img*.png"))
    assert len(pngs) == 2


def test_report_writes_layer_plots(toy_runs, tmp_path):
    out = run_stage("report", tmp_path, "--sweep", toy_runs["probe"].parent)
    for task in DEFAULTS["probe"]["tasks"]:
        assert (out / f"layers_{task}.png").stat().st_size > 0
    assert "aligned" in json.loads((out / "report.json").read_text())["knn"]


def test_report_without_results(tmp_path):
    (tmp_path / "empty").mkdir()
    code, _ = run(["report", "--sweep", str(tmp_path / "empty"), "--out-dir", str(tmp_path)])
    assert code == 4


def test_stages_do_not_touch_inputs(toy_runs, tmp_path):
    ckpt = toy_runs["pretrain"] / "model.npz"
    before = ckpt.read_bytes()
    run_stage("spatial-align", tmp_path, "--data", toy_runs["gen-data"], "--checkpoint", ckpt)
    assert ckpt.read_bytes() == before


def test_viz_layer_flag(toy_runs, tmp_path):
    out = run_stage("viz", tmp_path, "--data", toy_runs["gen-data"], "--checkpoint",
                    toy_runs["pretrain"] / "model.npz", "--layer", 1)
    assert len(list(out.glob("layer1_img*.png"))) == 2


def test_loaded_shapes_keep_full_objects(toy_runs):
    train = load_shapes(toy_runs["gen-data"] / "shapes_train.npz")
    assert all(o.color is not None and o.position is not None for objs in train.objects for o in objs)
    assert np.asarray(train.images).dtype == np.uint8


def test_exponent_floats_in_files(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("pretrain: {lr: 1e-3}\nvideo_ft: {average: pooled}\n")
    cfg = load_config(p)
    assert cfg["pretrain"]["lr"] == 1e-3 and cfg["video_ft"]["average"] == "pooled"
