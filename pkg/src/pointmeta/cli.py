"""Command-line surface: reproducible synthesis, training, and evaluation runs.

Exit codes: 0 success, 2 usage/config problems, 3 training divergence,
4 dataset capacity errors, 5 I/O failures.  Every command that writes
outputs also writes a ``manifest.json`` recording the tool version, seeds,
config hash, and SHA-256 fingerprints of its inputs and outputs; reruns
with an identical manifest produce bit-identical files.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import Tape, backward, cross_entropy, finite_diff_gradient, grad_array
from .data import (
    DEFAULT_CLASSES,
    DEFAULT_PALETTE,
    DEFAULT_TEMPLATES,
    SyntheticAreaSpec,
    generate_synthetic_area,
    load_dataset,
    load_room,
    load_vocab,
    partition_blocks,
    featurize_block,
    resample_block,
    export_ply,
    write_dataset,
)
from .errors import CapacityError, ConfigError, DivergenceError, ValidationError
from .metrics import metrics_report
from .model import PointNetConfig, forward, init_params, load_checkpoint, predict_labels, save_checkpoint
from .sampler import EpisodeSpec, build_task_distribution, index_categories
from .trainer import MetaConfig, adapt_and_eval, pretrain


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _fingerprint_tree(root) -> dict[str, str]:
    root = Path(root)
    if root.is_file():
        return {root.name: _sha256_file(root)}
    return {str(p.relative_to(root)): _sha256_file(p) for p in sorted(root.rglob("*")) if p.is_file()}


def write_manifest(out_dir: Path, command: str, config_obj, seeds: dict, inputs: dict[str, str]) -> None:
    """Fingerprint everything in ``out_dir`` and record the run parameters."""
    blob = json.dumps(config_obj, sort_keys=True).encode("utf-8")
    outputs = {
        str(p.relative_to(out_dir)): _sha256_file(p)
        for p in sorted(out_dir.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }
    manifest = {
        "tool": "pointmeta",
        "version": __version__,
        "command": command,
        "config_hash": hashlib.sha256(blob).hexdigest(),
        "seeds": seeds,
        "inputs": inputs,
        "outputs": outputs,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


# ---------------------------------------------------------------------------
# synth


def _area_specs_from_json(spec: dict) -> list[SyntheticAreaSpec]:
    if "areas" not in spec or not spec["areas"]:
        raise ConfigError("synthetic spec needs a non-empty 'areas' list")
    classes = tuple(spec.get("classes", DEFAULT_CLASSES))
    out = []
    for entry in spec["areas"]:
        if "name" not in entry or "rooms" not in entry:
            raise ConfigError("each area needs 'name' and 'rooms'")
        rooms = tuple((room_type, int(count)) for room_type, count in entry["rooms"].items())
        for room_type, _ in rooms:
            if room_type not in DEFAULT_TEMPLATES:
                raise ConfigError(f"no synthetic template for room type {room_type!r}")
        out.append(
            SyntheticAreaSpec(
                name=entry["name"],
                rooms=rooms,
                density=float(spec.get("density", 110.0)),
                color_noise=float(spec.get("color_noise", 6.0)),
                room_tint=float(spec.get("room_tint", 14.0)),
                classes=classes,
            )
        )
    return out


def cmd_synth(args) -> int:
    spec = _load_json(args.spec)
    area_specs = _area_specs_from_json(spec)
    out = Path(args.out)
    areas = []
    for i, area_spec in enumerate(area_specs):
        area_seed = int(np.random.SeedSequence([args.seed, i]).generate_state(1)[0])
        areas.append(generate_synthetic_area(area_spec, seed=area_seed))
    write_dataset(areas, area_specs[0].classes, out)
    for area in areas:
        n_blocks = sum(len(partition_blocks(room)) for room in area.rooms)
        n_points = sum(len(room) for room in area.rooms)
        print(f"{area.name}: {len(area.rooms)} rooms, {n_points} points, {n_blocks} blocks")
    write_manifest(out, "synth", spec, {"seed": args.seed}, {str(args.spec): _sha256_file(args.spec)})
    return 0


# ---------------------------------------------------------------------------
# ingest


def cmd_ingest(args) -> int:
    areas, vocab = load_dataset(args.data)
    print(f"vocabulary: {len(vocab)} classes ({', '.join(vocab)})")
    for area in areas:
        n_blocks = sum(len(partition_blocks(room)) for room in area.rooms)
        n_points = sum(len(room) for room in area.rooms)
        types = sorted({room.room_type for room in area.rooms})
        print(f"{area.name}: {len(area.rooms)} rooms, {n_points} points, {n_blocks} blocks, types: {', '.join(types)}")
    return 0


# ---------------------------------------------------------------------------
# pretrain


def _parse_run_config(cfg: dict):
    try:
        data = cfg["data"]
        root = data["root"]
    except KeyError as exc:
        raise ConfigError(f"run config missing key: {exc}") from exc
    episode = cfg.get("episode", {})
    spec = EpisodeSpec(
        ways=int(episode.get("ways", 2)),
        shots=int(episode.get("shots", 6)),
        query_multiplier=int(episode.get("queries", 1)),
        category_mode=episode.get("category_mode", "room_type"),
    )
    meta_cfg = cfg.get("meta", {})
    meta = MetaConfig(
        alpha=float(meta_cfg.get("alpha", 1e-3)),
        beta=float(meta_cfg.get("beta", 1e-3)),
        inner_steps=int(meta_cfg.get("inner_steps", 1)),
        tasks_per_batch=int(meta_cfg.get("tasks_per_batch", 1)),
        gradient_mode=meta_cfg.get("gradient_mode", "first_order"),
        collaborative=bool(meta_cfg.get("collaborative", True)),
        epochs=int(meta_cfg.get("epochs", 1)),
        steps_per_epoch=int(meta_cfg.get("steps_per_epoch", 0)),
        phase_betas=tuple(meta_cfg["phase_betas"]) if meta_cfg.get("phase_betas") else None,
    )
    return root, data, spec, meta, cfg.get("model", {}), cfg.get("seeds", {})


def _model_config(model_cfg: dict, num_classes: int, points_per_block: int) -> PointNetConfig:
    return PointNetConfig(
        num_classes=num_classes,
        input_dim=int(model_cfg.get("input_dim", 9)),
        mlp1_widths=tuple(model_cfg.get("mlp1_widths", (64, 64))),
        mlp2_widths=tuple(model_cfg.get("mlp2_widths", (64, 128, 256))),
        seg_head_widths=tuple(model_cfg.get("seg_head_widths", (128, 64))),
        use_tnet=bool(model_cfg.get("use_tnet", False)),
        points_per_block=points_per_block,
    )


def write_loss_csv(history, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "query_loss", "beta", "alpha"])
        for step, loss, beta, alpha in history:
            writer.writerow([step, repr(float(loss)), repr(float(beta)), repr(float(alpha))])


def _run_pretrain(areas, vocab, spec, meta, model_cfg, data_cfg, seeds, out: Path):
    points = int(data_cfg.get("points_per_block", 1024))
    model = _model_config(model_cfg, num_classes=len(vocab), points_per_block=points)
    index = index_categories(areas, mode=spec.category_mode, points_per_block=points)
    needed = meta.epochs * meta.steps_per_epoch * meta.batch_size
    dist = build_task_distribution(index, spec, count=needed, seed=int(seeds.get("tasks", 0)))
    out.mkdir(parents=True, exist_ok=True)

    def hook(epoch, state):
        save_checkpoint(out / f"ckpt_epoch{epoch}", model, state.theta)

    try:
        state = pretrain(dist, meta, model, init_seed=int(seeds.get("init", 0)), checkpoint_hook=hook)
    except DivergenceError as exc:
        write_loss_csv(exc.last_state.history, out / "loss.csv")
        raise
    write_loss_csv(state.history, out / "loss.csv")
    return state, model


def cmd_pretrain(args) -> int:
    cfg = _load_json(args.config)
    root, data_cfg, spec, meta, model_cfg, seeds = _parse_run_config(cfg)
    if args.seed is not None:
        seeds = {**seeds, "init": args.seed}
    areas, vocab = load_dataset(root)
    wanted = data_cfg.get("areas")
    if wanted:
        areas = [a for a in areas if a.name in wanted]
        if len(areas) != len(wanted):
            raise ConfigError(f"areas not found in {root}: {sorted(set(wanted) - {a.name for a in areas})}")
    out = Path(args.out)

    sweep = cfg.get("meta", {}).get("beta_sweep")
    if sweep:
        for beta in sweep:
            sub = out / f"beta_{beta:g}"
            state, _ = _run_pretrain(areas, vocab, spec, replace(meta, beta=float(beta)), model_cfg, data_cfg, seeds, sub)
            print(f"beta={beta:g}: final loss {state.losses[-1]:.4f}" if state.losses else f"beta={beta:g}: no steps")
    else:
        state, _ = _run_pretrain(areas, vocab, spec, meta, model_cfg, data_cfg, seeds, out)
        final = f"{state.losses[-1]:.4f}" if state.losses else "n/a (0 steps)"
        print(f"pretrained {len(state.history)} steps, final query loss {final}")
    write_manifest(out, "pretrain", cfg, dict(seeds), {str(args.config): _sha256_file(args.config)} | _prefixed_tree(root))
    return 0


def _prefixed_tree(root) -> dict[str, str]:
    return {f"{root}/{rel}": digest for rel, digest in _fingerprint_tree(root).items()}


# ---------------------------------------------------------------------------
# adapt-eval


def cmd_adapt_eval(args) -> int:
    if args.episodes < 1:
        raise ConfigError(f"--episodes must be >= 1, got {args.episodes}")
    model, theta = load_checkpoint(args.checkpoint)
    areas, vocab = load_dataset(args.data)
    if args.areas:
        wanted = args.areas.split(",")
        areas = [a for a in areas if a.name in wanted]
        if not areas:
            raise ConfigError(f"no matching areas among {wanted}")
    if len(vocab) != model.num_classes:
        raise ConfigError(f"vocabulary size {len(vocab)} != checkpoint classes {model.num_classes}")
    spec = EpisodeSpec(ways=args.ways, shots=args.shots, query_multiplier=args.queries)
    report = adapt_and_eval(
        theta,
        model,
        areas,
        spec,
        episodes=args.episodes,
        rng=np.random.default_rng(args.seed),
        beta=args.beta,
        inner_steps=args.inner_steps,
        points_per_block=args.points_per_block or model.points_per_block,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_report(report.cm, report.overall, vocab), encoding="utf-8")
    with open(out / "episodes.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["episode", "oacc", "macc", "miou"])
        for i, m in enumerate(report.per_episode):
            writer.writerow([i, repr(m.oacc), repr(m.macc), repr(m.miou)])
    summary = (
        f"episodes={args.episodes} oAcc={report.overall.oacc:.4f} "
        f"mAcc={report.overall.macc:.4f} mIoU={report.overall.miou:.4f} "
        f"(episode means: {report.mean_oacc:.4f}/{report.mean_macc:.4f}/{report.mean_miou:.4f})"
    )
    print(summary)
    write_manifest(
        out,
        "adapt-eval",
        {
            "ways": args.ways, "shots": args.shots, "queries": args.queries,
            "episodes": args.episodes, "beta": args.beta, "inner_steps": args.inner_steps,
            "points_per_block": args.points_per_block,
        },
        {"seed": args.seed},
        {str(args.checkpoint): _sha256_file(args.checkpoint)} | _prefixed_tree(args.data),
    )
    return 0


# ---------------------------------------------------------------------------
# cross-validate


def cmd_cross_validate(args) -> int:
    cfg = _load_json(args.config)
    root, data_cfg, spec, meta, model_cfg, seeds = _parse_run_config(cfg)
    eval_cfg = cfg.get("eval", {})
    episodes = int(eval_cfg.get("episodes", 20))
    eval_beta = float(eval_cfg.get("beta", meta.beta))
    eval_steps = int(eval_cfg.get("inner_steps", meta.inner_steps))
    eval_seed = int(eval_cfg.get("seed", 0))
    areas, vocab = load_dataset(root)
    points = int(data_cfg.get("points_per_block", 1024))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    names = [a.name for a in areas]
    table = {test: {src: "" for src in names} for test in names}
    for source in areas:
        state, model = _run_pretrain([source], vocab, spec, meta, model_cfg, data_cfg, seeds, out / f"pretrain_{source.name}")
        for target in areas:
            if target.name == source.name:
                continue
            report = adapt_and_eval(
                state.theta, model, [target], spec, episodes=episodes,
                rng=np.random.default_rng([eval_seed, names.index(source.name), names.index(target.name)]),
                beta=eval_beta, inner_steps=eval_steps, points_per_block=points,
            )
            table[target.name][source.name] = repr(report.overall.oacc)
            print(f"pretrain {source.name} -> test {target.name}: oAcc {report.overall.oacc:.4f}")
    with open(out / "crossval.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["test_area"] + names)
        for test in names:
            writer.writerow([test] + [table[test][src] for src in names])
    write_manifest(out, "cross-validate", cfg, dict(seeds) | {"eval": eval_seed}, _prefixed_tree(root))
    return 0


# ---------------------------------------------------------------------------
# export-ply


def cmd_export_ply(args) -> int:
    model, theta = load_checkpoint(args.checkpoint)
    vocab = load_vocab(args.vocab)
    if len(vocab) != model.num_classes:
        raise ConfigError(f"vocabulary size {len(vocab)} != checkpoint classes {model.num_classes}")
    room = load_room(args.room, vocab)
    palette = dict(DEFAULT_PALETTE)
    if args.palette:
        loaded = _load_json(args.palette)
        palette = {int(k): tuple(v) for k, v in loaded.items()}
    missing = [i for i in range(model.num_classes) if i not in palette]
    if missing:
        raise ConfigError(f"palette missing colors for classes {missing}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = 0
    for k, block in enumerate(partition_blocks(room)):
        resampled = resample_block(block, model.points_per_block, np.random.default_rng([args.seed, k]))
        features = featurize_block(resampled, room)
        labels = predict_labels(forward(model, theta, features))
        stem = f"{room.name}_block_{block.grid[0]}_{block.grid[1]}"
        export_ply(resampled, labels, palette, out / f"{stem}_pred.ply")
        export_ply(resampled, resampled.labels, palette, out / f"{stem}_truth.ply")
        written += 2
    print(f"wrote {written} PLY files to {out}")
    write_manifest(
        out, "export-ply", {"palette": args.palette or "default"}, {"seed": args.seed},
        {str(args.checkpoint): _sha256_file(args.checkpoint), str(args.room): _sha256_file(args.room)},
    )
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def _gradcheck_battery(bits: int, seed: int, inject_error: bool) -> list[tuple[str, float, float, bool]]:
    dtype = np.float32 if bits == 32 else np.float64
    tol = 1e-4 if bits == 32 else 1e-7
    rng = np.random.default_rng(seed)
    model = PointNetConfig(
        num_classes=3, mlp1_widths=(8, 8), mlp2_widths=(8, 16, 32), seg_head_widths=(16, 8), points_per_block=16
    )
    params = init_params(model, seed=seed, dtype=dtype)
    block = rng.normal(size=(16, 9)).astype(dtype)
    labels = rng.integers(0, 3, size=16)

    def loss_of(store):
        with Tape():
            return cross_entropy(forward(model, store.tensors(), block), labels).item()

    fd = finite_diff_gradient(loss_of, params.astype(np.float64), eps=1e-5)
    with Tape() as tape:
        tt = params.tensors()
        grads = backward(cross_entropy(forward(model, tt, block), labels), tape, tt)

    results = []
    names = sorted(params.keys())
    coords = rng.integers(0, 10**9, size=100)
    worst = 0.0
    for i, raw in enumerate(coords):
        name = names[int(raw) % len(names)]
        flat = int(raw) % params[name].size
        ad = float(grad_array(grads[name]).ravel()[flat])
        ref = float(fd[name].ravel()[flat])
        if inject_error and i == 0:
            ad = ad * 1.5 + 1.0  # negative control: a deliberately wrong gradient
        rel = abs(ad - ref) / max(abs(ad), abs(ref), 1e-3)
        worst = max(worst, rel)
    results.append((f"pointnet cross-entropy ({bits}-bit, 100 coords)", worst, tol, worst <= tol))
    return results


def cmd_gradcheck(args) -> int:
    results = _gradcheck_battery(args.bits, args.seed, args.inject_error)
    ok = True
    for name, worst, tol, passed in results:
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name}: worst rel-err {worst:.3g} (tolerance {tol:g})")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pointmeta", description=__doc__)
    parser.add_argument("--version", action="version", version=f"pointmeta {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    p.add_argument("--spec", required=True, help="synthetic dataset spec (JSON)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="load and validate a dataset, print stats")
    p.add_argument("--data", required=True, help="dataset root (areas + vocab.txt)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("pretrain", help="meta-train an initialization")
    p.add_argument("--config", required=True, help="run configuration (JSON)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the init seed")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt-eval", help="adapt a checkpoint on target episodes and score")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--areas", default=None, help="comma-separated area names (default: all)")
    p.add_argument("--ways", type=int, default=2)
    p.add_argument("--shots", type=int, default=6)
    p.add_argument("--queries", type=int, default=1, help="query multiplier t")
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--beta", type=float, default=1e-3)
    p.add_argument("--inner-steps", type=int, default=1)
    p.add_argument("--points-per-block", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_adapt_eval)

    p = sub.add_parser("cross-validate", help="pretrain on each area, evaluate on the others")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cross_validate)

    p = sub.add_parser("export-ply", help="write predicted and ground-truth PLY files per block")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--room", required=True, help="canonical room file")
    p.add_argument("--vocab", required=True)
    p.add_argument("--palette", default=None, help="JSON class-id -> [r, g, b]")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_ply)

    p = sub.add_parser("gradcheck", help="check reverse-mode gradients against finite differences")
    p.add_argument("--bits", type=int, choices=(32, 64), default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-error", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return 3
    except CapacityError as exc:
        print(f"capacity: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
