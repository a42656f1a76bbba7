"""``semcomm train|eval|verify``.

Exit codes: 0 success, 1 verification failure, 2 invalid configuration or
input data, 3 training aborted (divergence or barrier violation), 4
unreadable or incompatible checkpoint.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import channel as ch
from . import config as cfg_mod
from . import evaluation as ev
from . import feedback_link as fl
from . import semantics
from . import training as T
from . import verify as vf
from .errors import BarrierViolation, CheckpointError, ConfigurationError, IngestionError, TrainingError

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_TRAINING, EXIT_CHECKPOINT = 0, 1, 2, 3, 4


def build_task(cfg: dict):
    """Training set, evaluation source and architecture for a resolved config."""
    if cfg["task"] == "gm":
        gm = cfg["gm"]
        spec = semantics.GmSourceSpec(gm["n_class"], gm["obs_dim"], gm["n_agents"], gm["class_std"])
        dataset = semantics.gm_dataset(spec, gm["train_size"], T.stream_rng(cfg["seeds"]["data"], "data"))
        eval_source = spec
    else:
        m = cfg["mnist"]
        dataset = semantics.load_mnist_quadrants(
            semantics.MnistQuadrantSpec(m["images_path"], m["labels_path"], m["subset_size"]))
        if m["test_images_path"] is not None:
            eval_source = semantics.load_mnist_quadrants(
                semantics.MnistQuadrantSpec(m["test_images_path"], m["test_labels_path"]))
        else:
            eval_source = dataset
    if len(dataset) < cfg["schedule"]["batch_size"]:
        raise ConfigurationError(f"{len(dataset)} training samples is less than one batch", "schedule.batch_size")
    arch = T.Architecture(
        n_agents=dataset.parts.shape[1], part_dim=dataset.parts.shape[2], n_class=dataset.n_class,
        n_tx=cfg["n_tx"], n_feat=cfg["n_feat"], n_rx=cfg["n_rx"], norm_mode=cfg["norm_mode"],
        perfect_comm=cfg["regime"] == "perfect_comm",
    )
    return dataset, eval_source, arch


def schedule_of(cfg: dict) -> T.Schedule:
    return T.Schedule(**cfg["schedule"])


def channel_of(cfg: dict) -> ch.ChannelConfig:
    return ch.ChannelConfig(**cfg["channel"])


def _resolve(args) -> dict:
    raw = cfg_mod.load(args.config) if args.config else {}
    if args.out:
        raw["out_dir"] = args.out
    return cfg_mod.resolve(raw, args.override or (), args.seed)


def _environment() -> dict:
    return {"semcomm": __version__, "numpy": np.__version__, "python": platform.python_version()}


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_train(args) -> int:
    cfg = _resolve(args)
    dataset, _, arch = build_task(cfg)
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    state = T.init_state(arch, cfg["seeds"], cfg["regime"], cfg["learning_rate"], cfg["weight_decay"])
    link = fl.make_link(cfg["link"])
    manifest = {"command": "train", "config": cfg, "environment": _environment(),
                "artifacts": {"checkpoint": "model.ckpt", "trace": "trace.csv"}}
    try:
        state = T.train(state, dataset, schedule_of(cfg), channel_of(cfg), cfg["sigma_pi2"], link=link)
    except (TrainingError, BarrierViolation) as exc:
        T.write_trace_csv(out / "trace.csv", getattr(exc, "trace", state.trace))
        manifest["status"] = f"aborted: {exc}"
        _write_json(out / "manifest.json", manifest)
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    finally:
        link.close()
    T.save_checkpoint(out / "model.ckpt", state, cfg)
    T.write_trace_csv(out / "trace.csv", state.trace)
    manifest["status"] = "ok"
    manifest["result"] = {"epoch": state.epoch, "raw_steps": state.raw_steps,
                          "final_ce": state.trace[-1][2] if state.trace else None, **state.meta}
    _write_json(out / "manifest.json", manifest)
    print(f"trained {cfg['regime']} for {state.epoch:g} epochs, final CE {manifest['result']['final_ce']:.4f}; "
          f"artifacts in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    state, stored = T.load_checkpoint(args.checkpoint)
    if args.config:
        raw = cfg_mod.load(args.config)
    else:
        raw = {k: v for k, v in stored.items() if k != "out_dir"}
    overrides = list(args.override or ())
    if args.snr_grid:
        overrides.append(("eval.snr_grid", [float(v) for v in args.snr_grid.split(",")]))
    if args.n_eval is not None:
        overrides.append(("eval.n_eval", args.n_eval))
    raw["out_dir"] = args.out or str(Path(args.checkpoint).parent)
    cfg = cfg_mod.resolve(raw, overrides, None)
    if args.seed is not None:
        cfg["eval"]["seed"] = args.seed
    _, eval_source, arch = build_task(cfg)
    if state.enc.n_agents != arch.n_agents or state.dec.n_class != arch.n_class:
        raise CheckpointError("checkpoint does not match the task in the config")
    result = ev.sweep_snr(state, eval_source, cfg["eval"]["snr_grid"], cfg["eval"]["n_eval"],
                          np.random.default_rng(cfg["eval"]["seed"]))
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    result.to_csv(out / "sweep.csv")
    _write_json(out / "eval_manifest.json", {"command": "eval", "checkpoint": str(args.checkpoint), "config": cfg,
                                             "environment": _environment(), "artifacts": {"sweep": "sweep.csv"}})
    for r in result.rows:
        print(f"snr {r.snr_db:6.2f} dB  error {r.error_rate:.4f}  ce {r.ce_loss:.4f}  n {r.n_eval_samples}")
    return EXIT_OK


def cmd_verify(args) -> int:
    names = list(vf.SUITES) if args.suite in (None, ["all"]) else args.suite
    unknown = [n for n in names if n not in vf.SUITES]
    if unknown:
        raise ConfigurationError(f"unknown suite {unknown[0]!r}; choose from {sorted(vf.SUITES)}", "suite")
    rows, _ = vf.run_suites(names, seed=args.seed or 0)
    report = [r.as_dict() for r in rows]
    for r in report:
        print(json.dumps(r))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "verify_report.json", report)
    return EXIT_OK if all(r["pass"] for r in report) else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semcomm", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--seed", type=int, help="seed for every random stream")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--override", action="append", metavar="KEY=VALUE", help="dotted config override")

    common(sub.add_parser("train", help="train a system and write checkpoint, trace and manifest"))
    ev_p = sub.add_parser("eval", help="error rate and CE versus SNR for a checkpoint")
    common(ev_p)
    ev_p.add_argument("--checkpoint", required=True)
    ev_p.add_argument("--snr-grid", help="comma-separated SNR values in dB")
    ev_p.add_argument("--n-eval", type=int)
    vp = sub.add_parser("verify", help="run oracle suites and report pass/fail")
    vp.add_argument("--suite", action="append", help=f"one of {sorted(vf.SUITES)} or all (repeatable)")
    vp.add_argument("--seed", type=int)
    vp.add_argument("--out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"train": cmd_train, "eval": cmd_eval, "verify": cmd_verify}[args.command]
    try:
        return handler(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IngestionError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
