"""Command-line pipeline: gen-data, train, eval, infer, print-config.

Exit codes: 0 success, 1 validation error (bad config, flags or input
files), 2 runtime failure (numeric trouble, divergence, I/O).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .cinn import CINN, FlowModel, sample_posterior, train_stage2
from .condnet import CondNet, PoseDataset, prepare_image, prepare_volume, pretrain
from .config import DatasetManifest, ManifestRecord, RunConfig, config_to_json, load_config
from .drr import Image2D, calibrate_norm_constant, load_image, raw_integrals, save_image
from .errors import AmbiregError, ParameterError, RuntimeFailure, TrainingError, ValidationError
from .evaluation import (EvalConfig, evaluate_testset, histogram_svg, lao_histogram,
                         write_cases_jsonl, write_histogram_csv, write_summary)
from .geometry import mix_seed, pose_vector, sample_pose
from .modes import detect_modes
from .phantom import load_volume, make_phantom, save_volume
from .store import load_model, load_state, save_state

log = logging.getLogger("ambireg")

STAGE1_COLUMNS = ["epoch", "lr", "train_mse"]
STAGE2_COLUMNS = ["epoch", "lr", "train_nll"]


class StopRequested(Exception):
    pass


# -- gen-data -----------------------------------------------------------------

def phantom_plan(cfg: RunConfig, split: str):
    """(name, spec, kind, sampler) per phantom of one split."""
    d = cfg.data
    count = d.n_train_phantoms if split == "train" else d.n_test_phantoms
    base = cfg.seed if split == "train" else cfg.seed + d.test_seed_offset
    plan = []
    for i in range(count):
        marked = d.marked_every > 0 and i % d.marked_every == d.marked_every - 1
        spec = replace(d.phantom, seed=mix_seed(base, i), marker=d.marker if marked else None)
        sampler = replace(cfg.sampler, seed=mix_seed(cfg.sampler.seed ^ base, 1_000 + i))
        plan.append((f"{split}_{i:03d}", spec, "marked" if marked else "symmetric", sampler))
    return plan


def cmd_gen_data(cfg: RunConfig, out: Path) -> dict:
    data_dir = out / "data"
    (data_dir / "volumes").mkdir(parents=True, exist_ok=True)
    (data_dir / "images").mkdir(parents=True, exist_ok=True)
    cam = cfg.camera
    splits = {}
    for split in ("train", "test"):
        items = []
        for name, spec, kind, sampler in phantom_plan(cfg, split):
            vol = make_phantom(spec)
            vpath = f"volumes/{name}.vol"
            save_volume(vol, data_dir / vpath)
            for j in range(cfg.data.poses_per_phantom):
                pose = sample_pose(sampler, j)
                raw = raw_integrals(vol, pose, cam)
                items.append((vpath, f"images/{name}_{j:04d}.img", pose,
                              mix_seed(sampler.seed, j), kind, raw))
            log.info("rendered %s (%s)", name, kind)
        splits[split] = items
    calib = [it[5] for it in splits["train"][: cfg.data.calibration_images]]
    cam = cam.with_norm(calibrate_norm_constant(calib))
    paths = {}
    for split, items in splits.items():
        manifest = DatasetManifest(cam)
        for vpath, ipath, pose, seed, kind, raw in items:
            img = Image2D.from_array((raw / cam.norm_constant).astype(np.float32))
            save_image(img, data_dir / ipath)
            manifest.records.append(ManifestRecord(vpath, ipath, pose, seed, kind))
        paths[split] = data_dir / f"{split}.jsonl"
        manifest.write(paths[split])
    log.info("norm_constant %.6g", cam.norm_constant)
    return {"norm_constant": cam.norm_constant, **{k: str(v) for k, v in paths.items()},
            "n_train": len(splits["train"]), "n_test": len(splits["test"])}


# -- train --------------------------------------------------------------------

def load_dataset(manifest_path, cfg: RunConfig) -> PoseDataset:
    manifest = DatasetManifest.read(manifest_path)
    root = Path(manifest_path).parent
    vol_ids, volumes, index = {}, [], []
    images, targets = [], []
    for r in manifest.records:
        if r.volume_path not in vol_ids:
            vol_ids[r.volume_path] = len(volumes)
            volumes.append(prepare_volume(load_volume(root / r.volume_path), cfg.condnet))
        index.append(vol_ids[r.volume_path])
        images.append(prepare_image(load_image(root / r.image_path), cfg.condnet))
        targets.append(pose_vector(r.pose))
    if not images:
        raise ParameterError(f"{manifest_path}: manifest has no records")
    return PoseDataset(np.stack(volumes), np.array(index), np.stack(images), np.stack(targets))


def write_loss_csv(path, history, columns):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for h in history:
            w.writerow([h["epoch"], repr(h["lr"]), repr(h[columns[2]])])


def cmd_train(cfg: RunConfig, out: Path, stop_after: int | None = None) -> dict:
    """Two-stage training with per-epoch checkpoints; re-running resumes."""
    data = load_dataset(out / "data" / "train.jsonl", cfg)
    tdir = out / "train"
    tdir.mkdir(parents=True, exist_ok=True)
    s1_dir, s2_dir = tdir / "stage1", tdir / "stage2"
    budget = [stop_after]
    # output_root is where artifacts go, not a training input; keep it out so
    # checkpoints are byte-identical wherever the run lives
    cfg_meta = {"config": {k: v for k, v in cfg.to_dict().items() if k != "output_root"}}

    def tick():
        if budget[0] is not None:
            budget[0] -= 1
            if budget[0] <= 0:
                raise StopRequested

    st1 = cfg.stage1
    if s1_dir.exists():
        net, _, state1, meta = load_state(s1_dir)
        hist1, start1 = meta["history"], meta["next_epoch"]
    else:
        net = CondNet(cfg.condnet, np.random.default_rng([cfg.seed, 0]))
        state1, hist1, start1 = None, [], 0

    def save1(epoch, history, state):
        save_state(s1_dir, net, None, state, history, 1, epoch + 1, cfg_meta)
        write_loss_csv(tdir / "stage1_loss.csv", history, STAGE1_COLUMNS)
        tick()

    try:
        if not s2_dir.exists():
            hist1, _ = pretrain(net, data, st1.epochs, st1.batch_size, st1.lr, st1.weight_decay,
                                seed=cfg.seed, augment=st1.augment, state=state1,
                                start_epoch=start1, history=hist1, on_epoch=save1,
                                decay_every=st1.decay_every, decay_factor=st1.decay_factor,
                                half_turn=st1.half_turn)
            if not s1_dir.exists():
                save_state(s1_dir, net, None, None, [], 1, 0, cfg_meta)
                write_loss_csv(tdir / "stage1_loss.csv", [], STAGE1_COLUMNS)
            flow_cfg = replace(cfg.flow, seed=mix_seed(cfg.seed, cfg.flow.seed))
            flow = FlowModel(cfg.condnet.cond_dim, flow_cfg)
            state2, hist2, start2 = None, [], 0
            save_state(s2_dir, net, flow, None, [], 2, 0, cfg_meta)
            write_loss_csv(tdir / "stage2_loss.csv", [], STAGE2_COLUMNS)
        else:
            net, flow, state2, meta = load_state(s2_dir)
            hist2, start2 = meta["history"], meta["next_epoch"]
        model = CINN(net, flow)
        st2 = cfg.stage2

        def save2(epoch, history, state):
            save_state(s2_dir, net, flow, state, history, 2, epoch + 1, cfg_meta)
            write_loss_csv(tdir / "stage2_loss.csv", history, STAGE2_COLUMNS)
            tick()

        def dump(epoch, history, state):
            path = tdir / "diverged"
            save_state(path, net, flow, state, history, 2, epoch + 1, cfg_meta)
            return str(path)

        hist2, _ = train_stage2(model, data, st2.epochs, st2.batch_size, st2.lr, st2.weight_decay,
                                st2.decay_every, st2.decay_factor, seed=cfg.seed, augment=st2.augment,
                                state=state2, start_epoch=start2, history=hist2, on_epoch=save2,
                                on_diverge=dump, half_turn=st2.half_turn)
    except StopRequested:
        log.info("stopped after the requested number of epochs; re-run to resume")
        return {"stopped": True, "checkpoint": str(tdir)}
    return {
        "stopped": False,
        "checkpoint": str(s2_dir),
        "final_stage1_mse": hist1[-1]["train_mse"] if hist1 else None,
        "final_stage2_nll": hist2[-1]["train_nll"] if hist2 else None,
    }


# -- eval / infer -------------------------------------------------------------

def _model_path(out: Path, checkpoint):
    return Path(checkpoint) if checkpoint else out / "train" / "stage2"


def cmd_eval(cfg: RunConfig, out: Path, checkpoint=None, manifest_path=None) -> dict:
    manifest_path = Path(manifest_path) if manifest_path else out / "data" / "test.jsonl"
    manifest = DatasetManifest.read(manifest_path)
    if not manifest.records:
        raise ParameterError(f"{manifest_path}: manifest has no records")
    model = load_model(_model_path(out, checkpoint))
    root = manifest_path.parent
    volumes = {}
    cases = []
    for i, r in enumerate(manifest.records):
        if r.volume_path not in volumes:
            volumes[r.volume_path] = load_volume(root / r.volume_path)
        cases.append((str(i), volumes[r.volume_path], load_image(root / r.image_path), r.pose, r.phantom))
    ecfg = EvalConfig(cfg.modes.n_samples, cfg.modes.threshold, cfg.seed)
    summary, results = evaluate_testset(model, cases, manifest.camera, ecfg)
    edir = out / "eval"
    edir.mkdir(parents=True, exist_ok=True)
    write_cases_jsonl(results, edir / "cases.jsonl")
    write_summary(summary, edir / "summary.json", edir / "summary.csv")
    for i in cfg.modes.histogram_cases:
        if not 0 <= i < len(cases):
            continue
        _, vol, img, pose, _ = cases[i]
        samples = sample_posterior(model, vol, img, ecfg.n_samples, ecfg.seed + i)
        edges, counts = lao_histogram(samples)
        write_histogram_csv(edges, counts, edir / f"lao_hist_{i:04d}.csv")
        if cfg.modes.svg:
            (edir / f"lao_hist_{i:04d}.svg").write_text(histogram_svg(edges, counts, pose.lao))
    return summary.to_dict()


def cmd_infer(cfg: RunConfig, out: Path, volume_path, image_path, checkpoint=None) -> dict:
    vol = load_volume(volume_path)
    img = load_image(image_path)
    if tuple(img.dims) != tuple(cfg.camera.detector_px):
        raise ParameterError(f"image dims {img.dims} do not match detector {cfg.camera.detector_px}")
    model = load_model(_model_path(out, checkpoint))
    samples = sample_posterior(model, vol, img, cfg.modes.n_samples, cfg.seed)
    return detect_modes(samples, cfg.modes.threshold, cfg.seed).to_dict()


# -- entry point --------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ambireg", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON config file (defaults: see print-config)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key by dotted path, e.g. stage2.epochs=5 (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("print-config", help="print the effective configuration as JSON")
    sub.add_parser("gen-data", help="generate phantoms, poses, DRRs and manifests")
    t = sub.add_parser("train", help="two-stage training (resumes from existing checkpoints)")
    t.add_argument("--stop-after", type=int, default=None, metavar="N",
                   help="stop after N epochs in this invocation")
    e = sub.add_parser("eval", help="evaluate a checkpoint on the test manifest")
    e.add_argument("--checkpoint")
    e.add_argument("--manifest")
    i = sub.add_parser("infer", help="posterior modes for one volume/image pair")
    i.add_argument("--checkpoint")
    i.add_argument("--volume", required=True)
    i.add_argument("--image", required=True)
    return p


def _setup_logging(out: Path, command: str, verbose: bool):
    root = logging.getLogger("ambireg")
    root.setLevel(logging.INFO)
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.INFO if verbose else logging.WARNING)
    console.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    root.addHandler(console)
    if command in ("gen-data", "train", "eval"):
        out.mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(out / f"{command}.log", encoding="utf-8")
        fh.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
        root.addHandler(fh)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors exit 1, --help exits 0
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config, args.overrides)
        if args.command == "print-config":
            sys.stdout.write(config_to_json(cfg))
            return 0
        out = cfg.output_dir()
        _setup_logging(out, args.command, args.verbose)
        if args.command == "gen-data":
            result = cmd_gen_data(cfg, out)
        elif args.command == "train":
            result = cmd_train(cfg, out, args.stop_after)
        elif args.command == "eval":
            result = cmd_eval(cfg, out, args.checkpoint, args.manifest)
        else:
            result = cmd_infer(cfg, out, args.volume, args.image, args.checkpoint)
        print(json.dumps(result, indent=2, sort_keys=True))
        return 0
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingError as exc:
        where = f" (checkpoint: {exc.checkpoint})" if exc.checkpoint else ""
        print(f"training failed: {exc}{where}", file=sys.stderr)
        return 2
    except (RuntimeFailure, AmbiregError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
