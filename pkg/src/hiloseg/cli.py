"""Command line entry points: generate, train, eval, segment.

One process per run. Configuration is resolved as defaults < config file <
flags, and every command echoes the fully resolved configuration into its
output directory as ``config_resolved.txt`` so a run is reproducible from
that file and the seed alone. ``run.seed`` is the only seed: the generator
and sampler seeds are overwritten with it during resolution.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import (
    coerce_value,
    dataclass_to_kv,
    format_kv,
    format_to_strings,
    kv_to_dataclass,
    parse_kv_text,
)
from .data_io import (
    SPLITS,
    SynthConfig,
    HEADER,
    MAGIC,
    load_manifest,
    load_volume,
    save_volume,
    write_dataset,
    write_pgm,
)
from .errors import DivergenceError, FormatError
from .inference import BoundingBox, bb_iou, mise_evaluate, sampled_iou, segment_volume, voxel_iou
from .models import (
    HiLoConfig,
    HiLoModel,
    OnetConfig,
    OnetModel,
    extract_bounding_box,
    onet_decode,
    onet_encode,
    train_hilo,
    train_superres_onet,
)
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .queue import POLICIES, TrainingQueue
from .sampling import SamplerConfig
from .voxel import LabelVolume, VoxelVolume

log = logging.getLogger(__name__)

MODEL_KINDS = ("onet-sr", "onet-bb", "hilo-cnn", "hilo-onet")

# refuse occupancy training that would page whole volumes past this
_ONET_RAM_BUDGET = 1 << 30


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything a run needs, flags and module configs together.

    ``epochs`` and ``batch`` of -1 mean the selected model family's default
    (20 epochs / batch 16 for the pyramid models, 200 / 8 for the occupancy
    models); ``max_steps`` 0 means no cap and ``threads`` 0 defers to
    HILO_THREADS.
    """

    subcommand: str = ""
    model: str = "hilo-cnn"
    seed: int = 0
    precision: str = "float32"
    epochs: int = -1
    batch: int = -1
    lr: float = 0.001
    micro_batch: int = 2
    max_steps: int = 0
    validate_every: int = 128
    smoothing_window: int = 5
    queue_policy: str = "fifo"
    queue_capacity: int = 512
    pyramid_sampling: str = "bb"
    count: int = 32
    split: str = "test"
    region_margin: int = 50
    bb_margin: int = 10
    threads: int = 0
    oracle_bypass: bool = False
    data_dir: str = ""
    out_dir: str = ""
    checkpoint: str = ""
    input_path: str = ""
    region: str = ""
    export_slices: str = ""
    onet: OnetConfig = field(default_factory=OnetConfig)
    hilo: HiLoConfig = field(default_factory=HiLoConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self) -> None:
        if self.model not in MODEL_KINDS:
            raise ValueError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.queue_policy not in POLICIES:
            raise ValueError(f"queue policy must be one of {POLICIES}, got {self.queue_policy!r}")
        if self.pyramid_sampling not in ("bb", "volume"):
            raise ValueError(f"pyramid_sampling must be 'bb' or 'volume', got {self.pyramid_sampling!r}")
        if self.epochs < -1:
            raise ValueError(f"epochs must be >= 0 (-1 = family default), got {self.epochs}")
        if self.batch < -1 or self.batch == 0:
            raise ValueError(f"batch must be >= 1 (-1 = family default), got {self.batch}")
        for name, minimum in (
            ("micro_batch", 1), ("validate_every", 1), ("smoothing_window", 1),
            ("queue_capacity", 1), ("count", 1), ("max_steps", 0),
            ("region_margin", 0), ("bb_margin", 0), ("threads", 0), ("seed", 0),
        ):
            if getattr(self, name) < minimum:
                raise ValueError(f"{name} must be >= {minimum}, got {getattr(self, name)}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64


# ---------------------------------------------------------------------------
# config resolution: defaults < config file < flags


def _known_keys() -> set[str]:
    rc = RunConfig()
    keys = set()
    for f in dataclasses.fields(RunConfig):
        value = getattr(rc, f.name)
        if dataclasses.is_dataclass(value):
            keys |= {f"{f.name}.{g.name}" for g in dataclasses.fields(type(value))}
        elif f.name != "subcommand":
            keys.add(f"run.{f.name}")
    return keys


def runconfig_from_kv(kv: dict[str, str]) -> RunConfig:
    unknown = sorted(set(kv) - _known_keys())
    if unknown:
        raise FormatError(f"unknown config keys: {', '.join(unknown)}")
    rc = RunConfig()
    updates = {}
    for f in dataclasses.fields(RunConfig):
        value = getattr(rc, f.name)
        if dataclasses.is_dataclass(value):
            updates[f.name] = kv_to_dataclass(type(value), kv, f"{f.name}.")
        elif f.name != "subcommand":
            key = f"run.{f.name}"
            if key in kv:
                try:
                    updates[f.name] = coerce_value(kv[key], value)
                except ValueError as exc:
                    raise FormatError(f"bad value for {key}: {kv[key]!r} ({exc})") from exc
    return dataclasses.replace(rc, **updates)


def runconfig_text(rc: RunConfig) -> str:
    kv: dict[str, str] = {}
    for f in dataclasses.fields(RunConfig):
        value = getattr(rc, f.name)
        if dataclasses.is_dataclass(value):
            kv.update(dataclass_to_kv(value, f"{f.name}."))
        elif f.name != "subcommand":
            kv.update(format_to_strings({f"run.{f.name}": value}))
    return format_kv(kv)


# flag destination -> top-level RunConfig field
_RUN_FLAGS = {
    "model": "model", "seed": "seed", "precision": "precision", "epochs": "epochs",
    "batch": "batch", "lr": "lr", "micro_batch": "micro_batch", "max_steps": "max_steps",
    "validate_every": "validate_every", "smoothing_window": "smoothing_window",
    "queue": "queue_policy", "queue_size": "queue_capacity",
    "pyramid_sampling": "pyramid_sampling", "count": "count", "split": "split",
    "region_margin": "region_margin", "bb_margin": "bb_margin", "threads": "threads",
    "data": "data_dir", "out": "out_dir", "checkpoint": "checkpoint",
    "input": "input_path", "region": "region", "export_slices": "export_slices",
}

# flag destination -> (nested config field, its field name)
_PART_FLAGS = {
    "w": ("hilo", "window_size"),
    "d": ("hilo", "downsampling_factor"),
    "levels": ("hilo", "levels"),
    "conditioning": ("onet", "conditioning"),
    "width": ("onet", "width"),
    "resolution": ("onet", "coord_resolution"),
    "dims": ("synth", "dims"),
}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    file_kv: dict[str, str] = {}
    if getattr(args, "config", None):
        file_kv = parse_kv_text(Path(args.config).read_text(), source=str(args.config))
    rc = runconfig_from_kv(file_kv)

    updates = {}
    for dest, fname in _RUN_FLAGS.items():
        v = getattr(args, dest, None)
        if v is not None:
            updates[fname] = v
    if getattr(args, "oracle_bypass", False):
        updates["oracle_bypass"] = True
    part_updates: dict[str, dict] = {}
    for dest, (part, fname) in _PART_FLAGS.items():
        v = getattr(args, dest, None)
        if v is not None:
            if fname == "dims":
                v = coerce_value(v, (0, 0, 0))
            part_updates.setdefault(part, {})[fname] = v
    for part, pu in part_updates.items():
        updates[part] = dataclasses.replace(getattr(rc, part), **pu)
    rc = dataclasses.replace(rc, **updates)
    rc.subcommand = args.subcommand

    # the model kind decides the pyramid decoder
    if rc.model.startswith("hilo"):
        decoder = "cnn" if rc.model == "hilo-cnn" else "onet"
        if rc.hilo.decoder != decoder:
            rc.hilo = dataclasses.replace(rc.hilo, decoder=decoder)
    elif rc.model == "onet-bb":
        # box extraction defaults to coarse labels unless explicitly chosen
        explicit = "onet.coord_resolution" in file_kv or getattr(args, "resolution", None)
        if not explicit:
            rc.onet = dataclasses.replace(rc.onet, coord_resolution="low")

    if rc.subcommand == "train" and rc.model.startswith("onet"):
        queue_given = (
            getattr(args, "queue", None) is not None
            or getattr(args, "queue_size", None) is not None
            or "run.queue_policy" in file_kv
            or "run.queue_capacity" in file_kv
        )
        if queue_given:
            raise UsageError(
                "training queues drive the window-pyramid trainers; occupancy "
                "training loads whole pooled volumes per batch. Drop the queue "
                "settings or pick a hilo-* model."
            )

    # one seed governs every stream
    rc.synth = dataclasses.replace(rc.synth, seed=rc.seed)
    rc.sampler = dataclasses.replace(rc.sampler, seed=rc.seed)
    return rc


def _write_resolved(rc: RunConfig, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config_resolved.txt").write_text(runconfig_text(rc))


def _require(rc: RunConfig, **fields_needed) -> None:
    for flag, value in fields_needed.items():
        if not value:
            raise UsageError(f"{rc.subcommand} needs --{flag} (or the matching config key)")


# ---------------------------------------------------------------------------
# model plumbing


def _model_config_text(rc: RunConfig) -> str:
    """The config block stored in checkpoints: enough to rebuild the model."""
    kv = {"run.model": rc.model}
    kv.update(dataclass_to_kv(rc.onet, "onet."))
    kv.update(dataclass_to_kv(rc.hilo, "hilo."))
    return format_kv(kv)


def load_model(path):
    """Rebuild (kind, config, model) from a checkpoint file."""
    kind, text, state, _ = load_checkpoint(path)
    kv = parse_kv_text(text, source=f"{path} config block")
    try:
        if kind in ("onet-sr", "onet-bb"):
            cfg = kv_to_dataclass(OnetConfig, kv, "onet.")
            model = OnetModel(cfg)
        elif kind in ("hilo-cnn", "hilo-onet"):
            cfg = kv_to_dataclass(HiLoConfig, kv, "hilo.")
            model = HiLoModel(cfg)
        else:
            raise FormatError(f"{path}: unknown model kind {kind!r}")
        model.load_state_dict(state)
    except ValueError as exc:
        raise FormatError(f"{path}: checkpoint does not match its config ({exc})") from exc
    return kind, cfg, model.eval()


def _peek_dims(path) -> tuple[int, int, int]:
    with open(path, "rb") as fh:
        raw = fh.read(HEADER.size)
    if len(raw) < HEADER.size:
        raise FormatError(f"{path}: truncated header, {HEADER.size - len(raw)} bytes missing")
    magic, _, _, nx, ny, nz = HEADER.unpack(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic, not a volume file")
    return nx, ny, nz


def _predict_mask(rc: RunConfig, kind, cfg, model, vol: VoxelVolume,
                  region: BoundingBox | None) -> LabelVolume:
    """Binary prediction over a full volume for any model kind."""
    if kind.startswith("hilo"):
        return segment_volume(vol, model, cfg, region, threads=rc.threads or None)
    latent = onet_encode(vol, cfg, model)

    def decode(coords):
        return onet_decode(coords, latent, cfg, model, dims=vol.dims)

    pred = mise_evaluate(decode, vol.dims, initial_factor=8, threshold=cfg.threshold)
    if region is not None:
        clamped = region.clamp(vol.dims)
        keep = np.zeros(vol.dims, dtype=bool)
        if not clamped.is_empty:
            keep[tuple(slice(a, b + 1) for a, b in zip(clamped.min, clamped.max))] = True
        pred = LabelVolume(np.where(keep, pred.data, 0).astype(np.uint8))
    return pred


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(rc: RunConfig) -> int:
    _require(rc, out=rc.out_dir)
    manifest = write_dataset(rc.out_dir, rc.synth, rc.count)
    _write_resolved(rc, rc.out_dir)
    c = manifest.counts
    print(
        f"wrote {rc.count} instances to {rc.out_dir} "
        f"(train {c['train']}, val {c['val']}, test {c['test']})"
    )
    return 0


def _train_onet(rc: RunConfig, train_recs, val_recs):
    dims = _peek_dims(train_recs[0].path)
    vol_bytes = 4 * int(np.prod(dims))
    pooled = vol_bytes // max(1, rc.onet.input_downsample) ** 3
    label_bytes = int(np.prod(dims)) if rc.onet.coord_resolution == "high" else pooled // 4
    estimate = vol_bytes + len(train_recs) * (pooled + label_bytes)
    if estimate > _ONET_RAM_BUDGET:
        raise UsageError(
            f"occupancy training would hold ~{estimate / 2**20:.0f} MiB of volumes "
            f"in memory (budget {_ONET_RAM_BUDGET / 2**20:.0f} MiB); reduce the "
            "instance count or input scale, or train a memory-bounded hilo-* model"
        )
    epochs = rc.epochs if rc.epochs >= 0 else 200
    batch = rc.batch if rc.batch > 0 else 8
    state, metrics = train_superres_onet(
        train_recs, rc.onet, rc.sampler, epochs=epochs, batch=batch,
        val_dataset=val_recs, lr=rc.lr, micro_batch=rc.micro_batch,
        seed=rc.seed, dtype=rc.dtype, smoothing_window=rc.smoothing_window,
    )
    rows = [
        (e + 1, metrics["train_loss"][e], metrics["val_iou_smoothed"][e])
        for e in range(len(metrics["val_iou_smoothed"]))
    ]
    best = f"epoch {metrics['best_epoch'] + 1}" if metrics["best_epoch"] is not None else "final"
    return state, rows, f"{epochs} epochs", best


def _train_hilo(rc: RunConfig, train_recs, val_recs):
    epochs = rc.epochs if rc.epochs >= 0 else 20
    hcfg = rc.hilo
    if rc.batch > 0 and rc.batch != hcfg.batch_size:
        hcfg = dataclasses.replace(hcfg, batch_size=rc.batch)
    queue = TrainingQueue(rc.queue_capacity, rc.queue_policy)
    state, metrics = train_hilo(
        train_recs, hcfg, queue, epochs=epochs, sampler=rc.sampler,
        val_dataset=val_recs, lr=rc.lr, validate_every=rc.validate_every,
        micro_batch=rc.micro_batch, seed=rc.seed,
        smoothing_window=rc.smoothing_window, pyramid_sampling=rc.pyramid_sampling,
        max_steps=rc.max_steps or None, dtype=rc.dtype,
    )
    rows = [
        (step, metrics["train_loss"][step - 1], metrics["val_iou_smoothed"][k])
        for k, step in enumerate(metrics["val_steps"])
    ]
    best = f"step {metrics['best_step']}" if metrics["best_step"] is not None else "final"
    return state, rows, f"{metrics['steps']} steps", best


def cmd_train(rc: RunConfig) -> int:
    _require(rc, data=rc.data_dir, out=rc.out_dir)
    manifest = load_manifest(Path(rc.data_dir) / "manifest.tsv")
    train_recs = manifest.paths("train")
    val_recs = manifest.paths("val")
    if not train_recs:
        raise UsageError(f"no training instances in {rc.data_dir}")
    _write_resolved(rc, rc.out_dir)
    if rc.model.startswith("onet"):
        state, rows, extent, best = _train_onet(rc, train_recs, val_recs)
    else:
        state, rows, extent, best = _train_hilo(rc, train_recs, val_recs)

    out_dir = Path(rc.out_dir)
    ckpt = out_dir / "checkpoint.hckpt"
    save_checkpoint(ckpt, rc.model, _model_config_text(rc), state)
    lines = ["step\tloss\tsmoothed_iou"]
    lines += [f"{step}\t{loss:.6f}\t{iou:.6f}" for step, loss, iou in rows]
    (out_dir / "metrics.tsv").write_text("\n".join(lines) + "\n")
    tail = f", best at {best}" if rows else ""
    print(f"trained {rc.model} for {extent}{tail}; checkpoint at {ckpt}")
    return 0


def cmd_eval(rc: RunConfig) -> int:
    _require(rc, data=rc.data_dir, out=rc.out_dir)
    if not rc.oracle_bypass:
        _require(rc, checkpoint=rc.checkpoint)
    manifest = load_manifest(Path(rc.data_dir) / "manifest.tsv")
    records = manifest.paths(rc.split)
    if not records:
        raise UsageError(f"no {rc.split!r} instances in {rc.data_dir}")
    _write_resolved(rc, rc.out_dir)
    if rc.oracle_bypass:
        kind, cfg, model = rc.model, None, None
    else:
        kind, cfg, model = load_model(rc.checkpoint)

    rows = []
    for rec in records:
        vol = load_volume(rec.path)
        truth = load_volume(rec.label_path)
        tmask = truth.data != 0
        tight_bb = BoundingBox.from_points(np.argwhere(tmask))
        # both boxes go through the same margin construction, so BB IoU
        # measures localization rather than the margin itself
        truth_bb = extract_bounding_box(tmask, margin=rc.bb_margin, dims=vol.dims)
        if rc.oracle_bypass:
            pred = LabelVolume(tmask.astype(np.uint8))
        else:
            region = None
            if kind.startswith("hilo") and not tight_bb.is_empty:
                region = tight_bb.expand(rc.region_margin).clamp(vol.dims)
            pred = _predict_mask(rc, kind, cfg, model, vol, region)
        pred_bb = extract_bounding_box(pred.data != 0, margin=rc.bb_margin, dims=vol.dims)
        grid = pred.data

        def lookup(coords):
            return grid[coords[:, 0], coords[:, 1], coords[:, 2]].astype(np.float64)

        rows.append(
            (
                Path(rec.path).name,
                voxel_iou(pred, truth),
                bb_iou(pred_bb, truth_bb),
                sampled_iou(lookup, truth, n=rc.sampler.n_test_coords, seed=rc.seed),
            )
        )

    means = [float(np.mean([r[i] for r in rows])) for i in (1, 2, 3)]
    out_dir = Path(rc.out_dir)
    lines = ["instance\tvoxel_iou\tbb_iou\tsampled_iou"]
    lines += [f"{name}\t{v:.6f}\t{b:.6f}\t{s:.6f}" for name, v, b, s in rows]
    lines += [f"mean\t{means[0]:.6f}\t{means[1]:.6f}\t{means[2]:.6f}"]
    (out_dir / "metrics_eval.tsv").write_text("\n".join(lines) + "\n")
    print(
        f"evaluated {len(rows)} {rc.split} instances: mean voxel IoU {means[0]:.4f}, "
        f"BB IoU {means[1]:.4f}, sampled IoU {means[2]:.4f}"
    )
    return 0


def _parse_region(text: str) -> BoundingBox:
    try:
        lo_txt, hi_txt = text.split(":")
        lo = tuple(int(p) for p in lo_txt.split(","))
        hi = tuple(int(p) for p in hi_txt.split(","))
        if len(lo) != 3 or len(hi) != 3:
            raise ValueError
    except ValueError:
        raise UsageError(
            f"bad region {text!r}; expected 'x0,y0,z0:x1,y1,z1' inclusive bounds"
        ) from None
    return BoundingBox(lo, hi)


_AXES = {"x": 0, "y": 1, "z": 2, "0": 0, "1": 1, "2": 2}


def _parse_slices(text: str) -> list[tuple[int, int]]:
    out = []
    for entry in text.split(","):
        entry = entry.strip()
        if not entry:
            continue
        parts = entry.split(":")
        if len(parts) != 2 or parts[0].strip() not in _AXES:
            raise UsageError(f"bad slice {entry!r}; expected axis:index like z:40")
        try:
            idx = int(parts[1])
        except ValueError:
            raise UsageError(f"bad slice index in {entry!r}") from None
        out.append((_AXES[parts[0].strip()], idx))
    return out


def cmd_segment(rc: RunConfig) -> int:
    _require(rc, input=rc.input_path, checkpoint=rc.checkpoint, out=rc.out_dir)
    vol = load_volume(rc.input_path)
    if not isinstance(vol, VoxelVolume):
        raise UsageError(f"{rc.input_path} holds labels, not a scan volume")
    slices = _parse_slices(rc.export_slices) if rc.export_slices else []
    for axis, idx in slices:
        if not 0 <= idx < vol.dims[axis]:
            raise UsageError(f"slice index {idx} outside axis extent {vol.dims[axis]}")
    region = _parse_region(rc.region) if rc.region else None
    kind, cfg, model = load_model(rc.checkpoint)
    _write_resolved(rc, rc.out_dir)

    pred = _predict_mask(rc, kind, cfg, model, vol, region)
    out_dir = Path(rc.out_dir)
    pred_path = out_dir / "prediction.hv1"
    save_volume(pred_path, pred)
    written = [str(pred_path)]
    for axis, idx in slices:
        image = np.take(pred.data, idx, axis=axis)
        name = f"slice_{'xyz'[axis]}{idx:04d}.pgm"
        write_pgm(out_dir / name, image)
        written.append(str(out_dir / name))
    positive = int(np.count_nonzero(pred.data))
    print(f"segmented {rc.input_path}: {positive} positive voxels; wrote {', '.join(written)}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        raise UsageError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="seed for every random stream")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hiloseg", description="Memory-bounded 3D semantic segmentation.")
    sub = p.add_subparsers(dest="subcommand", metavar="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("generate", help="write a synthetic dataset with a split manifest")
    _add_common(g)
    g.add_argument("--count", type=int, help="number of instances")
    g.add_argument("--dims", help="volume dims, e.g. 160,104,154")

    t = sub.add_parser("train", help="train a model on a generated dataset")
    _add_common(t)
    t.add_argument("--data", help="dataset directory (holds manifest.tsv)")
    t.add_argument("--model", choices=MODEL_KINDS)
    t.add_argument("--w", type=int, help="window size")
    t.add_argument("--d", type=int, help="downsampling factor between pyramid levels")
    t.add_argument("--levels", type=int, help="pyramid level count")
    t.add_argument("--queue", choices=POLICIES, help="training queue policy")
    t.add_argument("--queue-size", type=int, dest="queue_size")
    t.add_argument("--conditioning", choices=("cbn", "concat"))
    t.add_argument("--width", choices=("wide", "shallow"))
    t.add_argument("--resolution", choices=("high", "low"), help="label grid resolution")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--micro-batch", type=int, dest="micro_batch")
    t.add_argument("--max-steps", type=int, dest="max_steps")
    t.add_argument("--validate-every", type=int, dest="validate_every")
    t.add_argument("--smoothing-window", type=int, dest="smoothing_window")
    t.add_argument("--pyramid-sampling", choices=("bb", "volume"), dest="pyramid_sampling")
    t.add_argument("--precision", choices=("float32", "float64"))

    e = sub.add_parser("eval", help="report IoU metrics for a checkpoint on a split")
    _add_common(e)
    e.add_argument("--data", help="dataset directory (holds manifest.tsv)")
    e.add_argument("--checkpoint")
    e.add_argument("--split", choices=SPLITS)
    e.add_argument("--model", choices=MODEL_KINDS, help="kind label for oracle-bypass runs")
    e.add_argument("--region-margin", type=int, dest="region_margin")
    e.add_argument("--bb-margin", type=int, dest="bb_margin")
    e.add_argument("--threads", type=int)
    e.add_argument(
        "--oracle-bypass", action="store_true", dest="oracle_bypass",
        help="score ground truth against itself instead of running the model",
    )

    s = sub.add_parser("segment", help="segment one volume file")
    _add_common(s)
    s.add_argument("--input", help="volume file to segment")
    s.add_argument("--checkpoint")
    s.add_argument("--region", help="restrict to x0,y0,z0:x1,y1,z1 (inclusive)")
    s.add_argument("--export-slices", dest="export_slices",
                   help="comma-separated axis:index entries, e.g. z:40,y:12")
    s.add_argument("--threads", type=int)
    return p


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "segment": cmd_segment,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        rc = resolve_config(args)
        return _COMMANDS[rc.subcommand](rc)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3
    except FormatError as exc:  # before ValueError: FormatError subclasses it
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
