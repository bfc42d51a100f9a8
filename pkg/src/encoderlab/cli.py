"""``encoderlab`` command line: one subcommand per pipeline stage.

Every stage writes into ``<out-dir>/<stage>-<config hash>-<timestamp>/`` the
resolved ``config.yaml``, a ``metrics.jsonl`` stream and its artefacts.
Stages pass data along by path: ``--data`` points at a ``gen-data`` run and
``--checkpoint`` / ``--teacher`` at a ``model.npz``.

Exit codes: 0 success, 2 bad usage or config, 3 invariant violation,
4 missing input file.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from .config import config_hash, derive_seed, load_config

log = logging.getLogger("encoderlab")

SUBCOMMANDS = ("gen-data", "pretrain", "distill", "video-ft", "spatial-align", "probe", "zeroshot", "viz", "report")


class MissingInput(FileNotFoundError):
    pass


# ------------------------------------------------------------------ helpers


def _require(path) -> Path:
    if path is None:
        raise MissingInput("a required input path was not given")
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"{p} does not exist")
    return p


def make_run_dir(out_dir, stage: str, cfg: dict) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(out_dir) / f"{stage}-{config_hash(cfg)}-{stamp}"
    run, i = base, 1
    while run.exists():
        run = base.with_name(f"{base.name}-{i}")
        i += 1
    run.mkdir(parents=True)
    (run / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))
    return run


def _vocab():
    from .data import ShapeVocab

    return ShapeVocab()


def save_shapes(path, ds):
    # captions may omit attributes, so the full object tuples are stored alongside
    objs = json.dumps([[[o.color, o.shape, o.position] for o in objs] for objs in ds.objects])
    np.savez_compressed(path, images=ds.images, instances=ds.instances, captions=np.array(ds.captions),
                        objects=np.array(objs))


def load_shapes(path):
    from .data import ShapeObject, ShapesDataset

    with np.load(_require(path)) as z:
        caps = [str(c) for c in z["captions"]]
        objs = [tuple(ShapeObject(*o) for o in row) for row in json.loads(str(z["objects"]))]
        return ShapesDataset(z["images"], caps, objs, z["instances"])


def save_clips(path, clips):
    np.savez_compressed(path, frames=clips.frames, masks=clips.masks, captions=np.array(clips.captions),
                        motions=np.array(clips.motions), colors=np.array([o.color for o in clips.objects]),
                        shapes=np.array([o.shape for o in clips.objects]),
                        positions=np.array([o.position or "" for o in clips.objects]))


def load_clips(path):
    from .data import MotionClips, ShapeObject

    with np.load(_require(path)) as z:
        objs = [ShapeObject(str(c), str(s), str(p) or None)
                for c, s, p in zip(z["colors"], z["shapes"], z["positions"])]
        return MotionClips(z["frames"], [str(c) for c in z["captions"]], objs, [str(m) for m in z["motions"]],
                           z["masks"])


def _load_model(path):
    from .model import load_checkpoint

    return load_checkpoint(_require(path))


def _resized(images, res):
    from .augment import resize

    x = np.asarray(images)
    if x.shape[1] == res:
        return x
    x = x.astype(np.float32) / 255.0
    return np.stack([resize(im, res) for im in x])


# ------------------------------------------------------------------- stages


def cmd_gen_data(args, cfg, run: Path) -> dict:
    from .data import gen_heldout_eval, gen_motion_clips, gen_shapes_dataset, heldout_pairs
    from .video import write_clip_dir
    from .zeroshot import shapes_prompt_bank, write_class_folders, write_retrieval_tsv

    d, v = cfg["data"], _vocab()
    seed = derive_seed(cfg["seed"], "gen-data")
    held = heldout_pairs(v, d["heldout_shift"])
    train = gen_shapes_dataset(seed, d["n_train"], v, count_weights=d["count_weights"], exclude=held,
                               attr_dropout=d["attr_dropout"])
    evals = gen_heldout_eval(seed + 1, d["n_eval"], v, pairs=held)
    indist = gen_shapes_dataset(seed + 2, d["n_eval"], v, count_weights=(1.0,), exclude=held)
    clips = gen_motion_clips(seed + 3, d["n_clips"], d["frames"], v, exclude=held,
                             static_fraction=d["static_fraction"])
    eval_clips = gen_motion_clips(seed + 4, d["n_eval_clips"], d["frames"], v, exclude=held,
                                  static_fraction=d["static_fraction"])
    save_shapes(run / "shapes_train.npz", train)
    save_shapes(run / "shapes_heldout.npz", evals)
    save_shapes(run / "shapes_indist.npz", indist)
    save_clips(run / "clips_train.npz", clips)
    save_clips(run / "clips_eval.npz", eval_clips)
    # plain layouts for external tools
    write_class_folders(run / "zeroshot_heldout", evals.images, evals.shape_labels, list(v.shapes))
    paths = []
    for i, img in enumerate(indist.images[:100]):
        from PIL import Image

        p = run / "retrieval" / f"{i:05d}.png"
        p.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(img).save(p)
        paths.append(p.relative_to(run))
    write_retrieval_tsv(run / "retrieval" / "pairs.tsv", paths, indist.captions[:100])
    write_clip_dir(run / "clips_eval", eval_clips.frames[:20], eval_clips.captions[:20])
    shapes_prompt_bank(v).to_file(run / "prompts.txt")
    (run / "heldout_pairs.json").write_text(json.dumps(held))
    return {"n_train": len(train), "n_heldout": len(evals), "n_clips": len(clips)}


def _vision_cfg(cfg, **over):
    from .model import EncoderConfig

    return EncoderConfig(**{**cfg["model"]["vision"], **over})


def _text_cfg(cfg, vocab_size, **over):
    from .model import TextConfig

    return TextConfig(vocab_size=vocab_size, **{**cfg["model"]["text"], **over})


def cmd_pretrain(args, cfg, run: Path) -> dict:
    from .contrastive import TrainConfig, train_run
    from .model import build_model, save_checkpoint

    train = load_shapes(Path(_require(args.data)) / "shapes_train.npz")
    words = _vocab().words()
    seed = derive_seed(cfg["seed"], "pretrain")
    model = build_model(_vision_cfg(cfg), _text_cfg(cfg, len(words) + 3), words, seed=seed)
    tcfg = TrainConfig(**cfg["pretrain"], seed=seed)
    rows = train_run(model, train.images, train.captions, tcfg, metrics_path=run / "metrics.jsonl")
    save_checkpoint(run / "model.npz", model, {"stage": "pretrain", "steps": len(rows)})
    return {"final_clip_loss": rows[-1]["clip_loss"], "steps": len(rows)}


def cmd_distill(args, cfg, run: Path) -> dict:
    from .distill import DistillConfig, argmax_agreement, distill_run
    from .model import build_model, save_checkpoint

    teacher, _ = _load_model(args.teacher)
    data = Path(_require(args.data))
    train = load_shapes(data / "shapes_train.npz")
    evals = load_shapes(data / "shapes_indist.npz")
    dc = dict(cfg["distill"])
    student_over = dc.pop("student")
    seed = derive_seed(cfg["seed"], "distill")
    if args.student:
        student, _ = _load_model(args.student)
    else:
        words = teacher.words
        student = build_model(_vision_cfg(cfg, **student_over),
                              _text_cfg(cfg, teacher.text.cfg.vocab_size, **{k: v for k, v in student_over.items()
                                                                             if k in ("width", "depth", "mlp_dim", "heads")}),
                              words, seed=seed)
    dcfg = DistillConfig(**dc, seed=seed)
    # held-out images ranked against their own captions: the relation being distilled
    ev = lambda s: argmax_agreement(s, teacher, evals.images, evals.captions, dcfg.resolution)  # noqa: E731
    rows = distill_run(student, teacher, train.images, train.captions, dcfg, metrics_path=run / "metrics.jsonl",
                       eval_fn=ev)
    save_checkpoint(run / "model.npz", student, {"stage": "distill"})
    agreement = ev(student)
    return {"agreement": agreement, "final_distill_loss": rows[-1]["distill_loss"]}


def cmd_video_ft(args, cfg, run: Path) -> dict:
    from .model import save_checkpoint
    from .video import VideoFTConfig, video_finetune_run, video_retrieval

    model, _ = _load_model(args.checkpoint)
    data = Path(_require(args.data))
    clips = load_clips(data / "clips_train.npz")
    ev = load_clips(data / "clips_eval.npz")
    vc = VideoFTConfig(**cfg["video_ft"], seed=derive_seed(cfg["seed"], "video-ft"))
    before = video_retrieval(model, ev.frames, ev.captions, vc.n_frames, vc.resolution)
    rows = video_finetune_run(model, clips.frames, clips.captions, vc, metrics_path=run / "metrics.jsonl")
    after = video_retrieval(model, ev.frames, ev.captions, vc.n_frames, vc.resolution)
    save_checkpoint(run / "model.npz", model, {"stage": "video-ft"})
    return {"before": before, "after": after, "final_clip_loss": rows[-1]["clip_loss"]}


def cmd_spatial_align(args, cfg, run: Path) -> dict:
    from .model import save_checkpoint
    from .spatial import SpatialAlignConfig, locality_correlation, spatial_align_run

    base, _ = _load_model(args.checkpoint)
    train = load_shapes(Path(_require(args.data)) / "shapes_train.npz")
    held = load_shapes(Path(args.data) / "shapes_indist.npz")
    scfg = SpatialAlignConfig(**cfg["spatial_align"], seed=derive_seed(cfg["seed"], "spatial-align"))
    res = scfg.resolution
    from .augment import resize_labels

    lab_eval = np.stack([resize_labels(m, res) for m in held.instances])
    before = locality_correlation(base, _resized(held.images, res), lab_eval)
    student, rows = spatial_align_run(base, train.images, train.instances, scfg, metrics_path=run / "metrics.jsonl")
    after = locality_correlation(student, _resized(held.images, res), lab_eval)
    save_checkpoint(run / "model.npz", student, {"stage": "spatial-align"})
    return {"locality_before": before, "locality_after": after}


def probe_data(data_dir, cfg, res: int, grid, task: str):
    """Inputs for one probe task, built from a gen-data run."""
    from .augment import resize_labels
    from .spatial import token_labels

    pc = cfg["probe"]
    data = Path(data_dir)
    if task == "tracking":
        clips = load_clips(data / "clips_eval.npz").subset(np.arange(pc["n_clips"]))
        masks = [np.stack([token_labels(resize_labels(m.astype(np.int64), res), grid) for m in clip])
                 for clip in clips.masks]
        return {"clips": [_resized(c, res) for c in clips.frames], "masks": masks}
    ds = load_shapes(data / "shapes_train.npz")
    tr, te = ds.subset(np.arange(pc["n_train"])), ds.subset(np.arange(pc["n_train"], pc["n_train"] + pc["n_test"]))
    if task == "seg":
        def lab(d):
            sem = d.semantic()
            return np.stack([token_labels(resize_labels(s, res), grid) for s in sem])

        return {"train_x": _resized(tr.images, res), "train_y": lab(tr), "test_x": _resized(te.images, res),
                "test_y": lab(te), "n_classes": 1 + len(_vocab().shapes)}
    return {"train_x": _resized(tr.images, res), "train_y": tr.shape_labels,
            "test_x": _resized(te.images, res), "test_y": te.shape_labels}


def cmd_probe(args, cfg, run: Path) -> dict:
    from .contrastive import MetricsWriter
    from .probes import ProbeConfig, layer_sweep

    model, meta = _load_model(args.checkpoint)
    pc = cfg["probe"]
    vis = model.visual
    layers = pc["layers"] or list(range(1, vis.cfg.depth + 1))
    pcfg = ProbeConfig(**{k: pc[k] for k in ("knn_k", "epochs", "lr", "context_n", "topk", "prop_temperature")},
                       seed=derive_seed(cfg["seed"], "probe"))
    writer = MetricsWriter(run / "metrics.jsonl")
    model_id = args.model_id or Path(args.checkpoint).parent.name
    out = {}
    res = pc["resolution"] or vis.cfg.image_size
    grid = (res // vis.cfg.patch_size,) * 2
    for task in pc["tasks"]:
        data = probe_data(args.data, cfg, res, grid, task)
        result = layer_sweep(model, task, layers, data, pcfg, model_id=model_id)
        result.save(run / f"probe_{task}.json")
        for k, s in sorted(result.per_layer.items()):
            writer({"task": task, "layer": k, "score": s})
        out[task] = result.to_json()
    return out


def cmd_zeroshot(args, cfg, run: Path) -> dict:
    from .contrastive import MetricsWriter
    from .video import video_retrieval
    from .zeroshot import (PromptBank, encode_images, eval_with_transforms, retrieve, shapes_prompt_bank,
                           write_results, zeroshot_accuracy)

    model, _ = _load_model(args.checkpoint)
    data = Path(_require(args.data))
    res = model.visual.cfg.image_size
    v = _vocab()
    bank = PromptBank.from_file(args.prompts) if args.prompts else shapes_prompt_bank(v)
    zc = cfg["zeroshot"]
    writer = MetricsWriter(run / "metrics.jsonl")
    out = {}
    for split in ("heldout", "indist"):
        ds = load_shapes(data / f"shapes_{split}.npz")
        best, per = eval_with_transforms(
            lambda m: zeroshot_accuracy(model, ds.images, ds.shape_labels, list(v.shapes), bank, res, m), zc["modes"])
        out[f"zeroshot_{split}"] = {"top1": best, **per}
        writer({"task": f"zeroshot_{split}", "top1": best, **per})
    ds = load_shapes(data / "shapes_indist.npz")
    import torch

    with torch.no_grad():
        txt = model.encode_text(model.tokenizer()(ds.captions))
        rr = retrieve(encode_images(model, ds.images, res), txt, use_dsl=zc["use_dsl"])
    out["retrieval"] = rr
    writer({"task": "retrieval", **rr})
    ev = load_clips(data / "clips_eval.npz")
    vr = video_retrieval(model, ev.frames, ev.captions, cfg["video_ft"]["n_frames"], res, use_dsl=zc["use_dsl"])
    out["video_retrieval"] = vr
    writer({"task": "video_retrieval", **vr})
    for name, r in out.items():
        write_results(run / f"{name}.json", name, r)
    return out


def cmd_viz(args, cfg, run: Path) -> dict:
    import torch

    from .contrastive import MetricsWriter
    from .model import normalize_images
    from .viz import save_png, visualize

    model, _ = _load_model(args.checkpoint)
    vis = model.visual
    vc = cfg["viz"]
    layer = args.layer or vc["layer"] or vis.cfg.depth
    ds = load_shapes(Path(_require(args.data)) / "shapes_indist.npz")
    imgs = _resized(ds.images[: vc["n_images"]], vis.cfg.image_size)
    with torch.no_grad():
        feats = vis.forward_features(normalize_images(imgs), [layer])[layer]
    grids = feats.as_grid().numpy()
    writer = MetricsWriter(run / "metrics.jsonl")
    for i, g in enumerate(grids):
        rgb = visualize(g, blend=vc["blend"])
        p = save_png(rgb, run / f"layer{layer}_img{i}.png", vc["scale"])
        writer({"image": i, "layer": layer, "png_sha256": __import__("hashlib").sha256(p.read_bytes()).hexdigest()})
    return {"layer": layer, "n_images": len(grids)}


def cmd_report(args, cfg, run: Path) -> dict:
    from .probes import ProbeResult, plot_layer_curves

    root = Path(_require(args.sweep))
    by_task: dict[str, list[ProbeResult]] = {}
    for f in sorted(root.rglob("probe_*.json")):
        r = ProbeResult.load(f)
        by_task.setdefault(r.task_id, []).append(r)
    if not by_task:
        raise MissingInput(f"no probe results under {root}")
    summary = {}
    for task, results in by_task.items():
        plot_layer_curves(results, run / f"layers_{task}.png")
        summary[task] = {r.model_id: {"best_layer": r.best_layer, "best": r.best_score, "last": r.last_score}
                         for r in results}
    (run / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "distill": cmd_distill,
    "video-ft": cmd_video_ft,
    "spatial-align": cmd_spatial_align,
    "probe": cmd_probe,
    "zeroshot": cmd_zeroshot,
    "viz": cmd_viz,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file merged over the defaults")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, e.g. pretrain.lr=1e-3 (repeatable)")
    common.add_argument("--out-dir", default="runs")
    common.add_argument("--seed", type=int, default=None, help="root seed; stage seeds derive from it")
    common.add_argument("--device", default="cpu")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="encoderlab", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="cmd", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name not in ("gen-data", "report"):
            sp.add_argument("--data", help="gen-data run directory")
        if name in ("video-ft", "spatial-align", "probe", "zeroshot", "viz"):
            sp.add_argument("--checkpoint", help="model.npz to start from")
        if name == "distill":
            sp.add_argument("--teacher", help="teacher model.npz")
            sp.add_argument("--student", help="optional student model.npz; default is a fresh student")
        if name == "probe":
            sp.add_argument("--model-id", default=None)
        if name == "zeroshot":
            sp.add_argument("--prompts", help="prompt bank file, one template per line")
        if name == "viz":
            sp.add_argument("--layer", type=int, default=None, help="tap layer to visualise (default: last)")
        if name == "report":
            sp.add_argument("--sweep", help="directory searched recursively for probe_*.json")
    return p


def run(argv=None) -> tuple[int, Path | None]:
    from .contrastive import InvariantError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.device != "cpu":
        log.warning("only the cpu device is supported; ignoring --device %s", args.device)
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
    except (KeyError, ValueError, yaml.YAMLError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2, None
    import torch

    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    run_dir = make_run_dir(args.out_dir, args.cmd, cfg)
    try:
        summary = HANDLERS[args.cmd](args, cfg, run_dir)
    except MissingInput as e:
        print(f"missing input: {e}", file=sys.stderr)
        return 4, run_dir
    except (InvariantError, FloatingPointError) as e:
        print(f"invariant violated: {e}", file=sys.stderr)
        return 3, run_dir
    except RuntimeError as e:
        if "teacher parameters changed" in str(e) or "non-finite" in str(e) or "probe modified" in str(e):
            print(f"invariant violated: {e}", file=sys.stderr)
            return 3, run_dir
        raise
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=float))
    print(run_dir)
    return 0, run_dir


def main(argv=None) -> int:
    code, _ = run(argv)
    return code


if __name__ == "__main__":
    sys.exit(main())
