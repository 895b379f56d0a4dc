"""Batch experiment driver.

Subcommands: ``gen-data``, ``train``, ``eval``, ``sweep`` and ``export-tt``.
Every output file starts with a ``# diffref3d <kind> v<N> manifest=<hash>``
line and gets a ``<file>.manifest.json`` sidecar describing its inputs.

Exit codes: 0 success, 2 configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint
from .boxes import ConfigError
from .config import InferConfig, TrainConfig, dump_train_config, load_train_config, to_flat, train_config_from_flat
from .pipeline import DiffRef3D, evaluate, export_tt_norms, run_inference, train
from .scene import SceneSpec, generate_corpus, read_corpus, write_corpus

log = logging.getLogger("diffref3d")

DATA_DIR_ENV = "DIFFREF3D_DATA_DIR"
CSV_VERSION = 1
EXIT_CONFIG = 2
EXIT_IO = 3

EVAL_COLUMNS = [
    "row",
    "steps",
    "ensemble",
    "t",
    "mean_iou_proposals",
    "mean_iou_predictions",
    "recall_0.3",
    "recall_0.5",
    "recall_0.7",
    "ap_r40",
]


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode("utf-8")).hexdigest()[:16]


def write_manifest(out_path, command: str, config: dict, inputs: dict[str, str], seed: int | None) -> str:
    payload = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {k: {"path": str(v), "sha256": file_digest(v)} for k, v in inputs.items()},
        "outputs": {"path": str(out_path)},
    }
    # content only, so reruns in another directory reproduce the hash
    digest = manifest_hash(
        {
            "command": command,
            "config": config,
            "seed": seed,
            "inputs": {k: v["sha256"] for k, v in payload["inputs"].items()},
        }
    )
    payload["hash"] = digest
    with open(f"{out_path}.manifest.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    return digest


def write_csv(path, kind: str, digest: str, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# diffref3d {kind} v{CSV_VERSION} manifest={digest}\n")
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in columns})


def read_csv(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def resolve_input(path: str) -> Path:
    p = Path(path)
    if not p.exists() and not p.is_absolute() and os.environ.get(DATA_DIR_ENV):
        alt = Path(os.environ[DATA_DIR_ENV]) / p
        if alt.exists():
            return alt
    if not p.exists():
        raise FileNotFoundError(f"input not found: {path}")
    return p


# ---------------------------------------------------------------------------
# evaluation rows shared by eval and sweep
# ---------------------------------------------------------------------------


def eval_rows(model: DiffRef3D, scenes, infer_cfg: InferConfig):
    """One metrics row per sampling step plus a final row; also returns raw results and latency."""
    results, batches, ms = run_inference(model, scenes, infer_cfg)
    rows = []
    n_steps = infer_cfg.steps
    for k in range(n_steps):
        staged = [_stage(r, k) for r in results]
        rep = evaluate(staged, scenes, batches)
        rows.append(_report_row(f"step{k + 1}", infer_cfg, results[0].timesteps[k] if results else None, rep))
    final = evaluate(results, scenes, batches)
    rows.append(_report_row("final", infer_cfg, None, final))
    return rows, final, results, ms


def _stage(result, k):
    from dataclasses import replace

    return replace(
        result,
        boxes=result.ensembled[k],
        confidences=result.step_confidences[k],
        ensembled=result.ensembled[: k + 1],
        timesteps=result.timesteps[: k + 1],
    )


def _report_row(label, infer_cfg, t, rep):
    return {
        "row": label,
        "steps": infer_cfg.steps,
        "ensemble": infer_cfg.ensemble,
        "t": t,
        "mean_iou_proposals": rep.mean_iou_proposals,
        "mean_iou_predictions": rep.mean_iou_predictions,
        "recall_0.3": rep.recall_at[0.3],
        "recall_0.5": rep.recall_at[0.5],
        "recall_0.7": rep.recall_at[0.7],
        "ap_r40": rep.ap_r40,
    }


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.scenes < 0:
        raise ConfigError("--scenes must be >= 0")
    spec = SceneSpec()
    scenes = generate_corpus(args.seed, args.scenes, spec, start=args.start_id)
    write_corpus(args.out, scenes)
    write_manifest(args.out, "gen-data", {"scenes": args.scenes, "start_id": args.start_id, **to_flat(spec)}, {}, args.seed)
    log.info("wrote %d scenes to %s", len(scenes), args.out)
    return 0


def _load_config(path) -> TrainConfig:
    if path is None:
        return TrainConfig()
    return load_train_config(resolve_input(path))


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg = train_config_from_flat({**to_flat(cfg), "seed": args.seed})
    data_path = resolve_input(args.data)
    scenes = read_corpus(data_path)
    model = DiffRef3D(cfg)
    t0 = time.perf_counter()
    train_log = train(model, scenes, progress=lambda e, lg: log.info("epoch %d done (%.1fs)", e, time.perf_counter() - t0))
    checkpoint.save(model, args.out_ckpt)
    digest = write_manifest(args.out_ckpt, "train", to_flat(cfg), {"data": data_path}, cfg.seed)
    log_path = args.log or f"{args.out_ckpt}.log.csv"
    write_csv(log_path, "train-log", digest, ["step", "epoch", "reg_loss", "cls_loss"], train_log.rows)
    write_manifest(log_path, "train", to_flat(cfg), {"data": data_path}, cfg.seed)
    for key, value in sorted(train_log.counters.items()):
        log.info("%s: %d", key, value)
    return 0


def cmd_eval(args) -> int:
    infer_cfg = InferConfig(steps=args.steps, ensemble=args.ensemble, seed=args.seed)
    ckpt_path = resolve_input(args.ckpt)
    data_path = resolve_input(args.data)
    model = checkpoint.load(ckpt_path)
    if infer_cfg.steps > model.cfg.diffusion.T:
        raise ConfigError(f"--steps {infer_cfg.steps} exceeds diffusion.T={model.cfg.diffusion.T}")
    scenes = read_corpus(data_path)
    rows, final, results, ms = eval_rows(model, scenes, infer_cfg)
    columns = list(EVAL_COLUMNS)
    if args.with_latency:
        columns.append("latency_ms")
        for row in rows:
            row["latency_ms"] = ms
    inputs = {"checkpoint": ckpt_path, "data": data_path}
    digest = write_manifest(args.out, "eval", {"steps": args.steps, "ensemble": args.ensemble, "seed": args.seed}, inputs, args.seed)
    write_csv(args.out, "eval", digest, columns, rows)
    if args.trace:
        write_trace(args.trace, results, digest)
    log.info("final mean IoU %.4f (proposals %.4f), AP(R40) %s", final.mean_iou_predictions, final.mean_iou_proposals, final.ap_r40)
    return 0


def write_trace(path, results, digest: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": "diffref3d-trace", "version": CSV_VERSION, "manifest": digest}) + "\n")
        for res in results:
            for k, t in enumerate(res.timesteps):
                rec = {
                    "scene_id": res.scene_id,
                    "step": k + 1,
                    "t": t,
                    "boxes": res.step_boxes[k].tolist(),
                    "ensembled": res.ensembled[k].tolist(),
                    "confidences": res.step_confidences[k].tolist(),
                }
                fh.write(json.dumps(rec) + "\n")


def cmd_export_tt(args) -> int:
    ckpt_path = resolve_input(args.ckpt)
    model = checkpoint.load(ckpt_path)
    table = export_tt_norms(model)
    digest = write_manifest(args.out, "export-tt", {}, {"checkpoint": ckpt_path}, None)
    rows = [{"t": int(t), "scale_norm": float(n)} for t, n in table]
    write_csv(args.out, "tt-norms", digest, ["t", "scale_norm"], rows)
    return 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

SWEEP_AXES = {
    "snr": ("diffusion.snr", [1.0, 2.0, 4.0]),
    "tt": ("enable_tt", [False, True]),
    "steps": (None, [1, 2, 3, 4, 5]),
    "ensemble": (None, ["none", "nms", "mean"]),
}


def _parse_axis_value(axis: str, raw: str):
    if axis == "snr":
        return float(raw)
    if axis == "steps":
        return int(raw)
    if axis == "tt":
        low = raw.lower()
        if low in ("1", "true", "on", "yes"):
            return True
        if low in ("0", "false", "off", "no"):
            return False
        raise ConfigError(f"tt values must be on/off, got {raw!r}")
    if raw not in ("none", "nms", "mean"):
        raise ConfigError(f"unknown ensemble mode {raw!r}")
    return raw


def _train_cell(flat_cfg: dict, train_path: str, ckpt_path: str) -> str:
    cfg = train_config_from_flat(flat_cfg)
    model = DiffRef3D(cfg)
    train(model, read_corpus(train_path))
    checkpoint.save(model, ckpt_path)
    return ckpt_path


def _mean_iou_at(model, scenes, steps, ensemble, seed):
    _, final, _, _ = eval_rows(model, scenes, InferConfig(steps=steps, ensemble=ensemble, seed=seed))
    return final


def _min_latency(model, scenes, cfg: InferConfig, repeats: int) -> float:
    return min(run_inference(model, scenes, cfg)[2] for _ in range(repeats))


def cmd_sweep(args) -> int:
    if args.axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {args.axis!r}; choose from {sorted(SWEEP_AXES)}")
    key, defaults = SWEEP_AXES[args.axis]
    values = [_parse_axis_value(args.axis, v) for v in args.values] if args.values else defaults
    base = _load_config(args.config)
    train_path = resolve_input(args.data)
    eval_path = resolve_input(args.eval_data) if args.eval_data else train_path
    eval_scenes = read_corpus(eval_path)
    workdir = Path(args.workdir or f"{args.out}.cells")
    workdir.mkdir(parents=True, exist_ok=True)
    inputs = {"data": train_path, "eval_data": eval_path}
    rows: list[dict] = []

    if key is not None:
        cells = []
        for v in values:
            flat = {**to_flat(base), key: v}
            train_config_from_flat(flat)  # validate before spawning work
            cells.append((flat, str(train_path), str(workdir / f"{args.axis}_{v}.ckpt")))
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                ckpts = list(pool.map(_train_cell, *zip(*cells)))
        else:
            ckpts = [_train_cell(*c) for c in cells]
        label = "snr" if args.axis == "snr" else "tt"
        columns = [label, "step1_mean_iou", "step3_mean_iou", "step1_ap_r40", "step3_ap_r40"]
        for v, ckpt in zip(values, ckpts):
            model = checkpoint.load(ckpt)
            r1 = _mean_iou_at(model, eval_scenes, 1, "mean", args.seed)
            r3 = _mean_iou_at(model, eval_scenes, 3, "mean", args.seed)
            rows.append(
                {
                    label: v if args.axis == "snr" else ("on" if v else "off"),
                    "step1_mean_iou": r1.mean_iou_predictions,
                    "step3_mean_iou": r3.mean_iou_predictions,
                    "step1_ap_r40": r1.ap_r40,
                    "step3_ap_r40": r3.ap_r40,
                }
            )
    else:
        if args.ckpt:
            ckpt = resolve_input(args.ckpt)
            inputs["checkpoint"] = ckpt
        else:
            ckpt = _train_cell(to_flat(base), str(train_path), str(workdir / "model.ckpt"))
        model = checkpoint.load(ckpt)
        if args.axis == "steps":
            columns = ["steps", "mean_iou", "ap_r40", "latency_ms"]
            for v in values:
                cfg = InferConfig(steps=v, ensemble="mean", seed=args.seed)
                _, final, _, _ = eval_rows(model, eval_scenes, cfg)
                rows.append(
                    {
                        "steps": v,
                        "mean_iou": final.mean_iou_predictions,
                        "ap_r40": final.ap_r40,
                        "latency_ms": _min_latency(model, eval_scenes, cfg, args.repeats),
                    }
                )
        else:
            columns = ["ensemble", "step1", "step2", "step3", "step3_ap_r40"]
            for mode in values:
                row = {"ensemble": mode}
                for s in (1, 2, 3):
                    rep = _mean_iou_at(model, eval_scenes, s, mode, args.seed)
                    row[f"step{s}"] = rep.mean_iou_predictions
                    if s == 3:
                        row["step3_ap_r40"] = rep.ap_r40
                rows.append(row)

    digest = write_manifest(
        args.out, f"sweep:{args.axis}", {**to_flat(base), "axis": args.axis, "values": values}, inputs, base.seed
    )
    write_csv(args.out, f"sweep-{args.axis}", digest, columns, rows)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffref3d", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic scene corpus (JSON lines)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--start-id", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a refinement model")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out-ckpt", required=True)
    p.add_argument("--log", help="training log CSV (default: <out-ckpt>.log.csv)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="iterative inference and metrics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--ensemble", default="mean")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="per-step JSON-lines trace output")
    p.add_argument("--with-latency", action="store_true", help="add a wall-clock latency column")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="ablation tables over one axis")
    p.add_argument("--axis", required=True)
    p.add_argument("--values", nargs="*")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data")
    p.add_argument("--ckpt", help="trained model for the steps/ensemble axes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--repeats", type=int, default=3, help="timing repeats for the latency column")
    p.add_argument("--workdir")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-tt", help="scale-factor norm of the temporal transform for every t")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_tt)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, checkpoint.CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
