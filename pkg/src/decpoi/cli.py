"""Pipeline driver.

Subcommands mirror the protocol stages: synth -> pretrain -> neighbors ->
train -> eval, plus pipeline to chain them. Every artifact embeds the
config hash and seed that produced it; stages refuse mismatched chains
unless --force is given.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import numerics as nm
from .collab import DeviceState, init_devices, run_training
from .config import ExperimentConfig, combined_hash, load_configs, configs_from_values, parse_ablations
from .data import (SynthConfig, filter_sparse, generate_synthetic, load_checkins,
                   save_dataset, split_leave_one_out)
from .evaluation import evaluate
from .exceptions import DecpoiError, StageError
from .neighbors import (category_counts, identify_neighbors, load_neighbors,
                        save_neighbors, user_centroids, CentroidSet)
from .pretrain import pretrain
from .privacy import PrivacyBudget, perturb_centroids, perturb_counts
from .recommender import init_core_params

SYNTH_STREAM = 1
PRETRAIN_STREAM = 2
NEIGHBOR_STREAM = 3

CHECKINS_FILE = "checkins.csv"
POIS_FILE = "pois.csv"
DATASET_META = "dataset_meta.json"
PRETRAINED_FILE = "pretrained.json"
PRETRAIN_LOG = "pretrain_log.json"
NEIGHBORS_FILE = "neighbors.json"
DEVICES_FILE = "devices.json"
ROUND_LOG = "round_log.jsonl"
METRICS_JSON = "metrics.json"
METRICS_CSV = "metrics.csv"


def _budget(cfg: ExperimentConfig) -> PrivacyBudget:
    return PrivacyBudget(epsilon=cfg.epsilon, enabled=cfg.privacy_enabled,
                         centroid_floor=cfg.centroid_floor)


def _header(cfg, synth) -> dict:
    return {"config_hash": combined_hash(cfg, synth), "seed": cfg.seed}


def _check_chain(found: dict, cfg, synth, force: bool, artifact: str):
    expected = combined_hash(cfg, synth)
    got = found.get("config_hash")
    if got != expected and not force:
        raise StageError(
            f"{artifact} was produced under config {got}, current is {expected}; "
            "rerun the earlier stage or pass --force")


def _require(path: Path) -> Path:
    if not path.exists():
        raise StageError(f"missing input artifact: {path}")
    return path


def _load_dataset(out: Path, cfg, synth, force: bool):
    meta_path = _require(out / DATASET_META)
    meta = json.loads(meta_path.read_text())
    _check_chain(meta, cfg, synth, force, str(meta_path))
    dataset = load_checkins(_require(out / CHECKINS_FILE), _require(out / POIS_FILE))
    if cfg.filter_min_user > 0 and cfg.filter_min_poi > 0:
        dataset = filter_sparse(dataset, cfg.filter_min_user, cfg.filter_min_poi)
    return dataset


# ---------------------------------------------------------------------------
# Stages (callable directly; the CLI wires argparse onto these)
# ---------------------------------------------------------------------------

def cmd_synth(cfg: ExperimentConfig, synth: SynthConfig, out: Path, force: bool = False):
    out.mkdir(parents=True, exist_ok=True)
    dataset = generate_synthetic(synth, seed=np.random.default_rng(
        [cfg.seed, SYNTH_STREAM]).integers(2 ** 31))
    save_dataset(dataset, out / CHECKINS_FILE, out / POIS_FILE)
    meta = _header(cfg, synth) | {
        "users": dataset.n_users, "pois": dataset.n_pois,
        "categories": dataset.n_categories,
        "checkins": sum(len(t) for t in dataset.trajectories.values()),
    }
    (out / DATASET_META).write_text(json.dumps(meta, indent=1, sort_keys=True))
    return dataset


def cmd_pretrain(cfg: ExperimentConfig, synth: SynthConfig, out: Path, force: bool = False):
    dataset = _load_dataset(out, cfg, synth, force)
    rng = np.random.default_rng([cfg.seed, PRETRAIN_STREAM])
    result = pretrain(dataset.catalog, cfg, rng)
    nm.save_params(out / PRETRAINED_FILE, result.params,
                   header=_header(cfg, synth) | {"stage": "pretrain"})
    log = _header(cfg, synth) | {
        "dp_history": result.dp_history, "cp_history": result.cp_history,
        "epochs_run": result.epochs_run,
    }
    (out / PRETRAIN_LOG).write_text(json.dumps(log, indent=1, sort_keys=True))
    return result


def cmd_neighbors(cfg: ExperimentConfig, synth: SynthConfig, out: Path, force: bool = False):
    dataset = _load_dataset(out, cfg, synth, force)
    train, _ = split_leave_one_out(dataset, cfg.seq_cap)
    budget = _budget(cfg)
    centroid_sets, distributions = {}, {}
    for idx, user in enumerate(train.users()):
        rng = np.random.default_rng([cfg.seed, NEIGHBOR_STREAM, idx])
        traj = train.trajectories[user]
        raw = user_centroids(traj, dataset.catalog, cfg.threshold_km, rng)
        centroid_sets[user] = CentroidSet(user, perturb_centroids(raw.centroids, budget, rng))
        counts = category_counts(traj, dataset.catalog)
        distributions[user] = perturb_counts(counts, budget, rng)
    geo, cat = identify_neighbors(centroid_sets, distributions, cfg.q)
    save_neighbors(out / NEIGHBORS_FILE, geo, cat, header=_header(cfg, synth))
    return geo, cat


def cmd_train(cfg: ExperimentConfig, synth: SynthConfig, out: Path, force: bool = False):
    dataset = _load_dataset(out, cfg, synth, force)
    train, _ = split_leave_one_out(dataset, cfg.seq_cap)
    pretrained, header = nm.load_params(_require(out / PRETRAINED_FILE))
    _check_chain(header, cfg, synth, force, str(out / PRETRAINED_FILE))
    geo, cat, nheader = load_neighbors(_require(out / NEIGHBORS_FILE))
    _check_chain(nheader, cfg, synth, force, str(out / NEIGHBORS_FILE))

    devices = init_devices(train, pretrained, cfg, cfg.seed)
    result = run_training(devices, geo, cat, dataset.catalog, _budget(cfg), cfg,
                          workers=cfg.workers)
    payload = {
        "header": _header(cfg, synth) | {"stage": "train", "rounds": result.rounds_run,
                                         "history": result.history},
        "devices": {u: nm.params_to_dict(dev.params)
                    for u, dev in sorted(result.devices.items())},
    }
    (out / DEVICES_FILE).write_text(json.dumps(payload))
    with open(out / ROUND_LOG, "w", encoding="utf-8") as fh:
        for row in result.records:
            fh.write(json.dumps(row) + "\n")
    return result


def cmd_eval(cfg: ExperimentConfig, synth: SynthConfig, out: Path, force: bool = False):
    dataset = _load_dataset(out, cfg, synth, force)
    train, test = split_leave_one_out(dataset, cfg.seq_cap)
    payload = json.loads(_require(out / DEVICES_FILE).read_text())
    _check_chain(payload["header"], cfg, synth, force, str(out / DEVICES_FILE))
    devices = {}
    for user, params_dict in payload["devices"].items():
        devices[user] = DeviceState(
            user=user, trajectory=train.trajectories[user],
            params=nm.params_from_dict(params_dict),
            fusion=nm.ParamStore({}), rng=np.random.default_rng(0))
    report = evaluate(devices, test, dataset.catalog, cfg)
    report.save_json(out / METRICS_JSON, header=_header(cfg, synth))
    report.save_csv(out / METRICS_CSV)
    return report


def cmd_pipeline(cfg: ExperimentConfig, synth: SynthConfig, out: Path, force: bool = False):
    cmd_synth(cfg, synth, out, force)
    cmd_pretrain(cfg, synth, out, force)
    cmd_neighbors(cfg, synth, out, force)
    cmd_train(cfg, synth, out, force)
    return cmd_eval(cfg, synth, out, force)


STAGES = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "neighbors": cmd_neighbors,
    "train": cmd_train,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="decpoi",
        description="Decentralized collaborative next-POI recommendation, desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in STAGES.items():
        p = sub.add_parser(name, help=fn.__doc__ or f"run the {name} stage")
        p.add_argument("--config", type=Path, default=None,
                       help="key=value config file (defaults apply when omitted)")
        p.add_argument("--out", type=Path, required=True,
                       help="artifact directory shared by all stages")
        p.add_argument("--force", action="store_true",
                       help="chain stages even when config hashes mismatch")
        p.add_argument("--d", type=int, help="latent dimension")
        p.add_argument("--q", type=int, help="neighbors per kind")
        p.add_argument("--mu", type=float, help="neighbor aggregation proportion")
        p.add_argument("--epsilon", type=float, help="privacy budget")
        p.add_argument("--lr", type=float, help="learning rate")
        p.add_argument("--dropout", type=float, help="dropout rate")
        p.add_argument("--batch", type=int, help="mini-batch size")
        p.add_argument("--max-epochs", type=int, dest="max_epochs",
                       help="maximum training rounds")
        p.add_argument("--seed", type=int, help="global seed")
        p.add_argument("--workers", type=int, help="parallel device workers")
        p.add_argument("--ablation", action="append", default=[],
                       help="variant switch, e.g. -AN, -GN, -SN, -MIM, -PP, -CP, -DP "
                            "(repeatable or comma-separated)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key (repeatable)")
    return parser


def resolve_configs(args) -> tuple[ExperimentConfig, SynthConfig]:
    overrides: dict = {}
    for item in args.set:
        if "=" not in item:
            raise StageError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    for key in ("d", "q", "mu", "epsilon", "lr", "dropout", "batch",
                "max_epochs", "seed", "workers"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    tokens = []
    for chunk in args.ablation:
        tokens.extend(parse_ablations(chunk))
    if tokens:
        overrides["ablations"] = tuple(tokens)
    if args.config is not None:
        return load_configs(_require(args.config), overrides)
    return configs_from_values({}, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, synth = resolve_configs(args)
        result = STAGES[args.command](cfg, synth, args.out, force=args.force)
    except DecpoiError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.command in ("eval", "pipeline"):
        for name, value in result.summary().items():
            print(f"{name} = {value:.4f}")
    else:
        print(f"{args.command}: wrote artifacts to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
