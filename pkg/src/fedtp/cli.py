"""Command-line entry point: ``fedtp {partition,train,eval,rollout,finetune-novel}``.

All stages share one run directory (``--out``)::

    config.json          config echo written by the stage that created the run
    config.<stage>.json  per-stage config echo
    dataset.npa          the dataset, as named arrays
    manifest.json        client partition
    metrics.csv          one summary row per round
    client_metrics.csv   one row per client per round
    rounds.jsonl         full round reports
    checkpoints/         server state (final.npa, round_XXXX.npa)
    maps/                rollout maps as PGM
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis
from .config import ConfigError, ExperimentConfig, parse_config
from .experiment import build_dataset, build_manifest, build_simulation, load_dataset, save_dataset
from .models import model_forward
from .partition import PartitionManifest, check_manifest

log = logging.getLogger("fedtp")


class StageError(RuntimeError):
    def __init__(self, message: str, missing: Path | None = None):
        super().__init__(message)
        self.missing = missing


def _overrides(args) -> dict:
    o: dict = {}
    flat = {
        "rounds": args.rounds,
        "sample_rate": args.sample_rate,
        "seed": args.seed,
        "workers": args.workers,
        "out": args.out,
        "local_epochs": args.local_epochs,
        "lr": args.lr,
        "server_lr": args.server_lr,
        "batch_size": args.batch_size,
        "eval_every": args.eval_every,
        "checkpoint_every": args.checkpoint_every,
        "preset": args.preset,
    }
    o.update({k: v for k, v in flat.items() if v is not None})
    part = {
        "num_clients": args.clients,
        "alpha": args.alpha,
        "beta": args.beta_fine,
        "classes_per_client": args.classes_per_client,
        "sigma_max": args.sigma_max,
        "scheme": args.scheme,
    }
    part = {k: v for k, v in part.items() if v is not None}
    if part:
        o["partition"] = part
    if args.strategy is not None:
        o["strategy"] = {"name": args.strategy}
    if args.dataset is not None:
        o["dataset"] = {"kind": args.dataset}
    return o


def _run_dir(cfg: ExperimentConfig) -> Path:
    if cfg.out:
        return Path(cfg.out)
    return Path("runs") / time.strftime("%Y%m%d-%H%M%S")


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise StageError(f"missing {what}: {path}", path)
    return path


def _echo(run: Path, cfg: ExperimentConfig, stage: str, extra: dict | None = None) -> None:
    doc = {**cfg.to_dict(), **(extra or {})}
    doc["out"] = str(run)
    text = json.dumps(doc, indent=1, sort_keys=True)
    (run / f"config.{stage}.json").write_text(text)
    if not (run / "config.json").exists():
        (run / "config.json").write_text(text)


def _load_inputs(run: Path):
    ds = load_dataset(_require(run / "dataset.npa", "dataset"))
    manifest = PartitionManifest.load(_require(run / "manifest.json", "manifest"))
    return ds, manifest


def cmd_partition(cfg: ExperimentConfig, run: Path) -> int:
    run.mkdir(parents=True, exist_ok=True)
    ds = build_dataset(cfg)
    manifest = build_manifest(cfg, ds)
    check_manifest(manifest, ds)
    save_dataset(run / "dataset.npa", ds)
    manifest.save(run / "manifest.json")
    _echo(run, cfg, "partition", {"dataset_fingerprint": ds.fingerprint()})
    log.info("partitioned %d samples over %d clients", len(ds), manifest.num_clients)
    return 0


def cmd_train(cfg: ExperimentConfig, run: Path) -> int:
    ds, manifest = _load_inputs(run)
    check_manifest(manifest, ds)
    sim, _ = build_simulation(cfg, ds, manifest)
    _echo(run, cfg, "train", {"dataset_fingerprint": ds.fingerprint()})
    ckpt_dir = run / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    echo = cfg.to_dict()

    def after_round(s, report):
        log.info("round %d weighted_acc=%s", report.round, report.weighted_acc)
        if cfg.checkpoint_every and report.round % cfg.checkpoint_every == 0:
            s.save(ckpt_dir / f"round_{report.round:04d}.npa", echo)

    sim.run(callback=after_round)
    sim.save(ckpt_dir / "final.npa", echo)
    analysis.export_artifacts(run, sim.reports, embeddings=sim.server.embeddings or None)
    return 0


def _restore(cfg: ExperimentConfig, run: Path):
    ds, manifest = _load_inputs(run)
    ckpt = _require(run / "checkpoints" / "final.npa", "checkpoint")
    sim, novel = build_simulation(cfg, ds, manifest)
    sim.load(ckpt)
    return sim, novel


def cmd_eval(cfg: ExperimentConfig, run: Path) -> int:
    sim, _ = _restore(cfg, run)
    acc, correct, counts, weighted = sim.evaluate()
    doc = {"round": sim.server.round, "weighted_acc": weighted, "client_acc": {str(k): v for k, v in acc.items()}}
    (run / "eval.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    print(json.dumps({"weighted_acc": weighted}))
    return 0


def rollout_maps(sim, probe: np.ndarray) -> dict[str, np.ndarray]:
    """One rollout map per client for a single probe input."""
    cfg = sim.model_config
    maps = {}
    grid = cfg.image_extent // cfg.patch_size
    for c in sim.clients:
        _, trace = model_forward(sim.client_params(c), probe[None], cfg, trace=True)
        maps[f"client_{c.id}"] = analysis.attention_rollout(
            [t[0] for t in trace], (grid, grid), cfg.num_blocks, cls_token=cfg.pooling == "cls"
        )
    return maps


def cmd_rollout(cfg: ExperimentConfig, run: Path) -> int:
    sim, _ = _restore(cfg, run)
    if sim.model_config.task != "image-classification":
        raise StageError("rollout needs an image task")
    probe = sim.clients[0].test_x[0]
    maps = rollout_maps(sim, probe)
    analysis.export_artifacts(run, maps=maps)
    div = analysis.map_divergence(list(maps.values())) if len(maps) > 1 else 0.0
    (run / "rollout.json").write_text(json.dumps({"divergence": div, "maps": sorted(maps)}, indent=1))
    print(json.dumps({"divergence": div}))
    return 0


def cmd_finetune_novel(cfg: ExperimentConfig, run: Path, epochs: int = 1) -> int:
    sim, novel = _restore(cfg, run)
    if not novel:
        raise StageError("no novel clients configured (partition.novel_clients = 0)")
    rows = []
    for c in novel:
        before, after, _ = sim.finetune_novel_client(c, epochs)
        rows.append({"client": c.id, "before": before, "after": after})
    (run / "novel.json").write_text(json.dumps(rows, indent=1))
    print(json.dumps(rows))
    return 0


COMMANDS = {
    "partition": cmd_partition,
    "train": cmd_train,
    "eval": cmd_eval,
    "rollout": cmd_rollout,
    "finetune-novel": cmd_finetune_novel,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedtp", description="Personalized-attention federated learning simulator")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", type=Path, help="JSON config file")
    ap.add_argument("--preset", choices=["desk", "paper"])
    ap.add_argument("--strategy")
    ap.add_argument("--dataset", choices=["synth_image", "synth_char", "cifar10", "cifar100"])
    ap.add_argument("--scheme", choices=["pathological", "dirichlet", "pachinko"])
    ap.add_argument("--rounds", type=int)
    ap.add_argument("--clients", type=int)
    ap.add_argument("--sample_rate", "--sample-rate", type=float, dest="sample_rate")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--workers", type=int)
    ap.add_argument("--out")
    ap.add_argument("--local-epochs", type=int, dest="local_epochs")
    ap.add_argument("--lr", type=float)
    ap.add_argument("--server-lr", type=float, dest="server_lr")
    ap.add_argument("--batch-size", type=int, dest="batch_size")
    ap.add_argument("--eval-every", type=int, dest="eval_every")
    ap.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    ap.add_argument("--alpha", type=float)
    ap.add_argument("--beta-fine", type=float, dest="beta_fine")
    ap.add_argument("--classes-per-client", type=int, dest="classes_per_client")
    ap.add_argument("--sigma-max", type=float, dest="sigma_max")
    ap.add_argument("--epochs", type=int, default=1, help="fine-tuning epochs for finetune-novel")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _fail(message: str, **extra) -> int:
    print(json.dumps({"error": message, **extra}), file=sys.stderr)
    return 2


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = parse_config(args.config, _overrides(args))
    except (ConfigError, OSError, json.JSONDecodeError) as err:
        return _fail(f"config: {err}")
    run = _run_dir(cfg)
    try:
        if args.command == "finetune-novel":
            return cmd_finetune_novel(cfg, run, args.epochs)
        return COMMANDS[args.command](cfg, run)
    except StageError as err:
        extra = {"missing": str(err.missing)} if err.missing else {}
        return _fail(str(err), **extra)
    except (ValueError, RuntimeError, OSError, KeyError) as err:
        return _fail(f"{args.command}: {err}")


if __name__ == "__main__":
    sys.exit(main())
