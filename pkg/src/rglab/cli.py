"""Command-line entry point: ``rglab train | attribute | eval``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import attribution as A
from . import data as D
from . import evaluation as E
from . import nn

logger = logging.getLogger("rglab")

EXPERIMENTS = ("patch", "noise", "featocc", "roar-kar", "adversarial")
RULE_FLAGS = {"pr1": "PR1", "pr2": "PR2", "pr3": "PR3", "pr4": "PR4", "mod": "RectGradMod"}


class UsageError(Exception):
    """Bad or missing user input; maps to exit code 2."""


@dataclass
class RunConfig:
    command: str = ""
    experiment: str | None = None
    data_dir: str | None = None
    synthetic: int | None = None
    synthetic_test: int = 1000
    train_limit: int | None = None
    test_limit: int | None = None
    checkpoint: str | None = None
    out: str = "out"
    seed: int = 0
    paper_scale: bool = False
    # training
    epochs: int = 20
    batch_size: int = 128
    lr: float = 1e-3
    occlude_patch: bool = False
    patch_record: str | None = None
    # attribution
    method: str = "rectgrad"
    q: float = 98.0
    rule: str = "pr1"
    padding_trick: bool | None = None
    prr: bool = False
    final_threshold_q: float | None = None
    final_zero_threshold: bool | None = None
    index: int = 0
    image: str | None = None
    class_index: int | None = None
    color: bool = False
    # experiments
    num_images: int = 200
    mask_dir: str | None = None
    layer: list[int] = field(default_factory=list)
    trials: int = 50
    estimator: list[str] = field(default_factory=lambda: ["random", "rectgrad", "saliency"])
    fractions: list[float] = field(default_factory=lambda: [0.1, 0.5, 0.9])
    retrains: int = 1
    retrain_epochs: int | None = None
    epsilon: float = 0.01

    def apply_scale(self) -> "RunConfig":
        if not self.paper_scale:
            return self
        return replace(self, fractions=[0.1, 0.3, 0.5, 0.7, 0.9], retrains=3, train_limit=None, epochs=20, retrain_epochs=20)


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with RunConfig fields; flags override it")
    p.add_argument("--data-dir", help="CIFAR-10 binary directory (fallback: $RGLAB_DATA_DIR)")
    p.add_argument("--synthetic", type=int, metavar="N", help="use N synthetic training images instead of CIFAR-10")
    p.add_argument("--synthetic-test", type=int, metavar="N")
    p.add_argument("--train-limit", type=int)
    p.add_argument("--test-limit", type=int)
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--paper-scale", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")


def _attribution_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--q", type=float)
    p.add_argument("--rule", choices=sorted(RULE_FLAGS))
    p.add_argument("--padding-trick", dest="padding_trick", action="store_true")
    p.add_argument("--no-padding-trick", dest="padding_trick", action="store_false")
    p.add_argument("--prr", action="store_true")
    p.add_argument("--final-threshold-q", type=float)
    p.add_argument("--no-final-threshold", dest="final_zero_threshold", action="store_false")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rglab", description="Rectified-gradient attribution lab")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the CIFAR-10 CNN", argument_default=argparse.SUPPRESS)
    _common(t)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--occlude-patch", action="store_true")

    a = sub.add_parser("attribute", help="compute attribution maps for one image", argument_default=argparse.SUPPRESS)
    _common(a)
    _attribution_flags(a)
    a.add_argument("--method", help=f"one of {', '.join(A.METHODS)} or 'all'")
    a.add_argument("--index", type=int, help="test-set image index")
    a.add_argument("--image", help="raw float32 file holding one 3x32x32 image in [-1, 1]")
    a.add_argument("--class", dest="class_index", type=int, help="class to explain (default: predicted)")
    a.add_argument("--color", action="store_true", help="diverging colour PPM instead of grayscale PGM")

    e = sub.add_parser("eval", help="run a quantitative experiment", argument_default=argparse.SUPPRESS)
    e.add_argument("experiment", choices=EXPERIMENTS)
    _common(e)
    _attribution_flags(e)
    e.add_argument("--patch-record")
    e.add_argument("--num-images", type=int)
    e.add_argument("--mask-dir")
    e.add_argument("--layer", type=int, action="append")
    e.add_argument("--trials", type=int)
    e.add_argument("--estimator", action="append")
    e.add_argument("--fractions", type=float, nargs="+")
    e.add_argument("--retrains", type=int)
    e.add_argument("--epochs", type=int, help="training epochs for reference nets")
    e.add_argument("--retrain-epochs", type=int)
    e.add_argument("--batch-size", type=int)
    e.add_argument("--lr", type=float)
    e.add_argument("--epsilon", type=float)
    return parser


def resolve_config(argv) -> tuple[RunConfig, bool]:
    args = vars(build_parser().parse_args(argv))
    verbose = args.pop("verbose", False)
    merged: dict = {}
    if "config" in args:
        path = Path(args.pop("config"))
        try:
            merged.update(json.loads(path.read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {path}: {exc}") from exc
    merged.update(args)
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(merged) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    return RunConfig(**merged).apply_scale(), verbose


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def load_data(cfg: RunConfig) -> tuple[D.Dataset, D.Dataset]:
    if cfg.synthetic:
        return (
            D.synthetic_dataset(cfg.synthetic, cfg.seed, "train"),
            D.synthetic_dataset(cfg.synthetic_test, cfg.seed + 1, "test"),
        )
    directory = D.default_data_dir(cfg.data_dir)
    if directory is None:
        raise UsageError("no dataset: pass --data-dir, set RGLAB_DATA_DIR, or use --synthetic N")
    try:
        return D.load_cifar10(directory, cfg.train_limit, cfg.test_limit)
    except (FileNotFoundError, D.DataFormatError) as exc:
        raise UsageError(str(exc)) from exc


def load_checkpoint(cfg: RunConfig) -> tuple[nn.NetworkSpec, nn.Checkpoint]:
    if not cfg.checkpoint:
        raise UsageError("--checkpoint is required")
    try:
        ckpt = nn.load_weights(cfg.checkpoint)
    except FileNotFoundError as exc:
        raise UsageError(f"checkpoint not found: {cfg.checkpoint}") from exc
    except nn.CheckpointFormatError as exc:
        raise UsageError(f"{cfg.checkpoint}: {exc}") from exc
    return nn.spec_from_checkpoint(ckpt), ckpt


def attribution_config(cfg: RunConfig, method: str) -> A.AttributionConfig:
    return A.AttributionConfig(
        method=method,
        rule=RULE_FLAGS[cfg.rule],
        q=cfg.q,
        use_padding_trick=cfg.padding_trick,
        use_prr=cfg.prr,
        final_zero_threshold=cfg.final_zero_threshold,
        final_threshold_q=cfg.final_threshold_q,
        seed=cfg.seed,
    )


def experiment_configs(cfg: RunConfig) -> dict[str, A.AttributionConfig]:
    """Comparison set: RectGrad (+PRR) with the padding trick, baselines final-thresholded."""
    q_final = 95.0 if cfg.final_threshold_q is None else cfg.final_threshold_q
    configs = A.standard_configs(final_threshold_q=q_final, seed=cfg.seed)
    for name in ("rectgrad", "rectgrad_prr"):
        configs[name] = replace(configs[name], q=cfg.q, rule=RULE_FLAGS[cfg.rule])
        if cfg.padding_trick is not None:
            configs[name] = replace(configs[name], use_padding_trick=cfg.padding_trick)
    return configs


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _report_path(cfg: RunConfig, default_name: str) -> Path:
    out = Path(cfg.out)
    if out.suffix == ".json":
        out.parent.mkdir(parents=True, exist_ok=True)
        return out
    out.mkdir(parents=True, exist_ok=True)
    return out / default_name


def _config_echo(cfg: RunConfig) -> dict:
    return asdict(cfg)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train(cfg: RunConfig) -> int:
    train, test = load_data(cfg)
    out = _out_dir(cfg)
    patch = None
    if cfg.occlude_patch:
        train, patch = E.inject_patch_dataset(train, cfg.seed)
        test, _ = E.inject_patch_dataset(test, patch=patch)
        D.atomic_write_bytes(out / "patch.json", (json.dumps(patch.to_json(), sort_keys=True) + "\n").encode())
    spec = nn.NetworkSpec((3, 32, 32), nn.CIFAR_LAYERS)
    tcfg = nn.TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, seed=cfg.seed)
    lines = []

    def log_epoch(rec):
        lines.append(json.dumps(rec, sort_keys=True))
        print(lines[-1], flush=True)

    ckpt, _ = nn.train(spec, train.images, train.labels, tcfg, test.images, test.labels, on_epoch=log_epoch)
    ckpt.meta["occluded"] = bool(cfg.occlude_patch)
    nn.save_weights(ckpt, out / "checkpoint.rglb")
    D.atomic_write_bytes(out / "train_log.jsonl", ("\n".join(lines) + "\n" if lines else "").encode())
    E.write_report({"command": "train", "config": _config_echo(cfg), "log": lines and [json.loads(l) for l in lines],
                    "patch": patch}, out / "train_report.json")
    return 0


def _select_image(cfg: RunConfig, spec) -> tuple[np.ndarray, int | None]:
    if cfg.image:
        try:
            return D.load_raw(cfg.image, spec.input_shape), None
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read image {cfg.image}: {exc}") from exc
    _, test = load_data(cfg)
    if not 0 <= cfg.index < len(test):
        raise UsageError(f"--index {cfg.index} outside test set of size {len(test)}")
    return test.images[cfg.index], int(test.labels[cfg.index])


def cmd_attribute(cfg: RunConfig) -> int:
    spec, ckpt = load_checkpoint(cfg)
    if cfg.method == "all":
        methods = list(A.METHODS)
    elif cfg.method in A.METHODS:
        methods = [cfg.method]
    else:
        raise UsageError(f"unknown method {cfg.method!r}; valid: {', '.join(A.METHODS)}, all")
    image, label = _select_image(cfg, spec)
    logits, _ = nn.forward(spec, ckpt, image[None])
    pred = int(logits[0].argmax())
    cls = pred if cfg.class_index is None else cfg.class_index
    out = _out_dir(cfg)
    ext = "ppm" if cfg.color else "pgm"
    entries = {}
    for method in methods:
        acfg = attribution_config(cfg, method)
        amap = A.attribute(spec, ckpt, image, cls, acfg)
        D.render_heatmap(amap.values, out / f"{method}.{ext}", color=cfg.color)
        D.save_raw(amap.values, out / f"{method}.f32")
        entries[method] = {
            "heatmap": f"{method}.{ext}",
            "raw": f"{method}.f32",
            "shape": list(amap.shape),
            "config": amap.config,
            "min": float(amap.values.min()),
            "max": float(amap.values.max()),
        }
    E.write_report({"command": "attribute", "config": _config_echo(cfg), "label": label, "prediction": pred,
                    "class_index": cls, "maps": entries}, out / "attribute_report.json")
    return 0


def _load_patch(cfg: RunConfig) -> E.PatchRecord:
    path = Path(cfg.patch_record) if cfg.patch_record else (Path(cfg.checkpoint).parent / "patch.json" if cfg.checkpoint else None)
    if path is None or not path.is_file():
        raise UsageError("patch experiment needs --patch-record (or patch.json next to the checkpoint)")
    return E.PatchRecord.from_json(json.loads(path.read_text()))


def _masked_images(cfg: RunConfig, test: D.Dataset) -> tuple[np.ndarray, np.ndarray]:
    if cfg.mask_dir:
        masks = D.load_mask_dir(cfg.mask_dir)
        if not masks:
            raise UsageError(f"no <index>.pgm masks found in {cfg.mask_dir}")
        idx = np.array(sorted(i for i in masks if i < len(test)))
        return idx, np.stack([masks[i] for i in idx])
    if test.masks is None:
        raise UsageError("this experiment needs --mask-dir (segmentation masks named <test index>.pgm)")
    idx = np.arange(min(cfg.num_images, len(test)))
    return idx, test.masks[idx]


def eval_patch(cfg, spec, ckpt, test) -> dict:
    patch = _load_patch(cfg)
    images, _ = E.inject_patch(test.images[: cfg.num_images], patch=patch)
    labels = test.labels[: cfg.num_images]
    preds = nn.predict(spec, ckpt, images)
    results = {}
    for name, acfg in experiment_configs(cfg).items():
        maps = E.compute_maps(spec, ckpt, images, preds, acfg)
        sums, fracs = zip(*(E.patch_attribution_sum(m, patch.region) for m in maps)) if len(maps) else ((), ())
        results[name] = {"sum": E.summarize(sums), "fraction": E.summarize(fracs),
                         "fractions": list(fracs), "sums": list(sums)}
    return {"patch": patch, "accuracy": float(np.mean(preds == labels)), "methods": results}


def eval_noise(cfg, spec, ckpt, test) -> dict:
    idx, masks = _masked_images(cfg, test)
    images = test.images[idx]
    preds = nn.predict(spec, ckpt, images)
    results = {}
    for name, acfg in experiment_configs(cfg).items():
        maps = E.compute_maps(spec, ckpt, images, preds, acfg)
        bg = [E.background_attribution(m, k) for m, k in zip(maps, masks)]
        tv = [E.total_variation(m) for m in maps]
        results[name] = {"background": E.summarize(bg), "total_variation": E.summarize(tv),
                         "background_values": bg, "tv_values": tv}
    return {"indices": idx, "correct": (preds == test.labels[idx]).tolist(), "methods": results}


def eval_featocc(cfg, spec, ckpt, test) -> dict:
    idx, masks = _masked_images(cfg, test)
    shapes = spec.shapes()
    layers = cfg.layer or [i for i, s in enumerate(shapes) if len(s) == 3 and isinstance(spec.layers[i], nn.ReLU)]
    preds = nn.predict(spec, ckpt, test.images[idx])
    keep = preds == test.labels[idx]
    curves = {}
    for layer in layers:
        if not 0 <= layer < len(shapes) or len(shapes[layer]) != 3:
            raise UsageError(f"layer {layer} has no spatial grid")
        for which in ("fg", "bg"):
            per_image = [
                E.feature_map_occlusion_curve(spec, ckpt, test.images[i], m, layer, which, cfg.trials, cfg.seed + int(i))
                for i, m, ok in zip(idx, masks, keep) if ok
            ]
            if per_image:
                curves[f"layer{layer}_{which}"] = E.average_curves(per_image)
    return {"images_used": int(keep.sum()), "curves": curves}


def eval_roar_kar(cfg, spec, ckpt, train, test) -> dict:
    if cfg.train_limit is None and not cfg.paper_scale and not cfg.synthetic:
        train = train.head(10000)
    configs = experiment_configs(cfg)
    rcfg = nn.TrainConfig(epochs=cfg.retrain_epochs or cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, seed=cfg.seed)
    results = {}
    for est in cfg.estimator:
        if est == "random":
            estimator = "random"
        elif est in configs:
            estimator = configs[est]
        else:
            raise UsageError(f"unknown estimator {est!r}; valid: random, {', '.join(configs)}")
        try:
            res = E.roar_kar(spec, ckpt, train, test, estimator, cfg.fractions, ("roar", "kar"), cfg.retrains, rcfg, cfg.seed)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        results[est] = {"roar": res["roar"], "kar": res["kar"], "roar_auc": res["roar"].score, "kar_aoc": res["kar"].score}
    return {"estimators": results, "train_size": len(train), "test_size": len(test)}


def eval_adversarial(cfg, spec, ckpt, test, out: Path) -> dict:
    images = test.images[: cfg.num_images]
    labels = test.labels[: cfg.num_images]
    preds = nn.predict(spec, ckpt, images)
    correct = np.flatnonzero(preds == labels)
    x, y = images[correct], labels[correct]
    adv = E.fgsm(spec, ckpt, x, y, cfg.epsilon)
    adv_preds = nn.predict(spec, ckpt, adv)
    methods = {}
    per_image = [{"index": int(i), "clean_prediction": int(p), "adversarial_prediction": int(q), "maps": {}}
                 for i, p, q in zip(correct, preds[correct], adv_preds)]
    map_dir = out / "adversarial_maps"
    for name in ("rectgrad", "guided_bp", "saliency"):
        acfg = replace(experiment_configs(cfg)[name], final_threshold_q=None)
        clean = E.compute_maps(spec, ckpt, x, preds[correct], acfg)
        advm = E.compute_maps(spec, ckpt, adv, adv_preds, acfg)
        change = E.normalized_l1_change(clean, advm)
        methods[name] = {"normalized_l1_change": E.summarize(change)}
        for rec, c_map, a_map, ch in zip(per_image, clean, advm, change):
            stem = f"{rec['index']:05d}_{name}"
            D.save_raw(c_map, map_dir / f"{stem}_clean.f32")
            D.save_raw(a_map, map_dir / f"{stem}_adv.f32")
            rec["maps"][name] = {"clean": f"adversarial_maps/{stem}_clean.f32", "adversarial": f"adversarial_maps/{stem}_adv.f32",
                                 "normalized_l1_change": float(ch)}
    flips = adv_preds != preds[correct]
    return {"epsilon": cfg.epsilon, "correct": int(len(correct)), "flip_rate": float(flips.mean()) if len(correct) else 0.0,
            "methods": methods, "images": per_image}


def cmd_eval(cfg: RunConfig) -> int:
    spec, ckpt = load_checkpoint(cfg)
    train, test = load_data(cfg)
    path = _report_path(cfg, f"{cfg.experiment}_report.json")
    if cfg.experiment == "patch":
        body = eval_patch(cfg, spec, ckpt, test)
    elif cfg.experiment == "noise":
        body = eval_noise(cfg, spec, ckpt, test)
    elif cfg.experiment == "featocc":
        body = eval_featocc(cfg, spec, ckpt, test)
    elif cfg.experiment == "roar-kar":
        body = eval_roar_kar(cfg, spec, ckpt, train, test)
    else:
        body = eval_adversarial(cfg, spec, ckpt, test, path.parent)
    E.write_report({"command": "eval", "experiment": cfg.experiment, "config": _config_echo(cfg), **body}, path)
    print(path)
    return 0


COMMANDS = {"train": cmd_train, "attribute": cmd_attribute, "eval": cmd_eval}


def main(argv=None) -> int:
    try:
        cfg, verbose = resolve_config(argv)
    except SystemExit as exc:  # argparse has already printed the usage message
        return 0 if exc.code in (0, None) else 2
    except UsageError as exc:
        print(f"rglab: error: {exc}", file=sys.stderr)
        return 2
    except TypeError as exc:
        print(f"rglab: error: bad config: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[cfg.command](cfg)
    except UsageError as exc:
        print(f"rglab: error: {exc}", file=sys.stderr)
        return 2
    except Exception:  # noqa: BLE001
        logger.exception("internal error")
        return 1


if __name__ == "__main__":
    sys.exit(main())
