"""``masklab`` command-line front end.

Exit codes: 0 success, 1 unexpected error, 2 configuration or usage error,
3 I/O or file-format error, 4 training aborted on a non-finite loss,
5 checkpoint missing.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import baselines, config
from .errors import FormatError, MasklabError, TrainingFailure, UsageError
from .evalkit import counterfactual, emit_report, evaluate_explainer, write_overlays
from .evalkit.report import round9
from .explainer import ExplainerModel, explain, load_explainer, read_checkpoint, save_checkpoint
from .parallel import set_threads
from .trainer import LossWeights, TrainConfig, train
from .worlds import (
    BeaconPolicy,
    BeaconWorld,
    ReferenceValue,
    TinyCNNPolicy,
    collect_demonstrations,
    load_dataset,
    reference_value_for,
    save_dataset,
    tiny_cnn_policy_train,
)

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_IO, EXIT_NAN, EXIT_NO_CHECKPOINT = 0, 1, 2, 3, 4, 5
POLICY_FILE = "policy.vmc"

log = logging.getLogger("masklab")


class MissingCheckpoint(MasklabError):
    pass


# -- helpers ----------------------------------------------------------------------

def world_from_meta(meta):
    if meta.get("env", "beacon") != "beacon":
        raise UsageError(f"unknown environment {meta.get('env')!r}")
    return BeaconWorld(width=int(meta["width"]), height=int(meta["height"]), n_actions=int(meta["K"]),
                       n_beacons=int(meta["n_beacons"]), beacon_size=int(meta["beacon_size"]),
                       background=float(meta["background"]),
                       intensity_range=(float(meta["intensity_lo"]), float(meta["intensity_hi"])))


def save_policy(path, policy):
    save_checkpoint(path, policy.params, policy.config())


def load_expert(dataset_dir, ds):
    """The frozen expert that labelled a dataset."""
    path = Path(dataset_dir) / POLICY_FILE
    if ds.meta.get("policy") == TinyCNNPolicy.kind:
        if not path.exists():
            raise FileNotFoundError(f"dataset {dataset_dir} was labelled by a tiny CNN but {path} is missing")
        tensors, meta = read_checkpoint(path)
        policy = TinyCNNPolicy(meta["height"], meta["width"], meta["K"], channels=meta["channels"],
                               in_channels=ds.states.shape[1])
        policy.params.thaw()
        policy.params.load_state_dict(tensors)
        policy.params.freeze()
        return policy
    return BeaconPolicy.for_world(world_from_meta(ds.meta))


def reference(ds, override):
    if override:
        try:
            return ReferenceValue([float(x) for x in override.split(",")])
        except ValueError:
            raise UsageError(f"bad reference value {override!r}") from None
    return reference_value_for(world_from_meta(ds.meta))


def open_dataset(path):
    if not path:
        raise UsageError("--dataset is required")
    return load_dataset(path)


def find_checkpoints(paths):
    found = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            found.extend(sorted(p.rglob("*.vmc")))
        elif p.is_file():
            found.append(p)
        else:
            raise MissingCheckpoint(f"checkpoint {p} does not exist")
    found = [f for f in found if f.name != POLICY_FILE]
    if not found:
        raise MissingCheckpoint(f"no checkpoint found in {', '.join(map(str, paths)) or '(none given)'}")
    return found


def open_checkpoint(path):
    if not path or not Path(path).is_file():
        raise MissingCheckpoint(f"checkpoint {path or '(none given)'} does not exist")
    return load_explainer(path)


def check_index(ds, index):
    if not 0 <= index < len(ds):
        raise UsageError(f"index {index} outside dataset of {len(ds)} records")


def write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(round9(obj), sort_keys=True, indent=1) + "\n", encoding="utf-8")


# -- commands ---------------------------------------------------------------------

def cmd_collect(cfg):
    if cfg["env"] != "beacon":
        raise UsageError(f"unknown environment {cfg['env']!r}")
    out = Path(cfg["out"])
    if (out / "manifest.txt").exists() and not cfg["force"]:
        raise FileExistsError(f"{out} already holds a dataset; rerun with --force to overwrite")
    world = BeaconWorld(width=cfg["width"], height=cfg["height"], n_actions=cfg["n_actions"],
                        n_beacons=cfg["n_beacons"], beacon_size=cfg["beacon_size"])
    policy = BeaconPolicy.for_world(world)
    ds = collect_demonstrations(policy, world, cfg["n"], cfg["seed"])
    if cfg["policy"] == "tiny-cnn":
        cnn, agreement = tiny_cnn_policy_train(ds, epochs=cfg["policy_epochs"], seed=cfg["seed"])
        print(f"tiny CNN validation agreement with the analytic expert: {agreement:.3f}")
        relabelled = collect_demonstrations(cnn, world, cfg["n"], cfg["seed"])
        relabelled.meta["policy_agreement"] = round(agreement, 6)
        ds = relabelled
        save_dataset(ds, out, force=True)
        save_policy(out / POLICY_FILE, cnn)
    elif cfg["policy"] == "analytic":
        save_dataset(ds, out, force=cfg["force"])
    else:
        raise UsageError(f"unknown policy {cfg['policy']!r}; use analytic or tiny-cnn")
    config.dump(cfg, "collect", out / "collect.config.ini")
    sizes = {k: len(v) for k, v in ds.split.items()}
    print(f"wrote {len(ds)} records to {out} (train {sizes['train']}, valid {sizes['valid']}, "
          f"test {sizes['test']})")


def cmd_train(cfg):
    ds = open_dataset(cfg["dataset"])
    policy = load_expert(cfg["dataset"], ds)
    r = reference(ds, cfg["reference"])
    weights = LossWeights(cfg["lambda_e"], cfg["lambda_avg"], cfg["lambda_smooth"], cfg["lambda_l2"])
    out = Path(cfg["out"])
    config.dump(cfg, "train", out / "train.config.ini")
    _, c, h, w = ds.states.shape
    for seed in cfg["seeds"]:
        tc = TrainConfig(learning_rate=cfg["learning_rate"], batch_size=cfg["batch_size"],
                         epochs=cfg["epochs"], seed=seed, weights=weights)
        model = ExplainerModel(ds.n_actions, h, w, in_channels=c, hidden=cfg["hidden"], seed=seed)
        run = out / f"seed_{seed}"
        res = train(model, policy, ds, tc, r, checkpoint_path=run / "checkpoint.vmc",
                    log_path=run / "train_log.csv")
        print(f"seed {seed}: best epoch {res.best_epoch}, valid loss {res.best_valid:.6f} "
              f"-> {run / 'checkpoint.vmc'}")


class BaselineProvider:
    """Mask provider backed by a perturbation method.

    Only the policy's greedy action gets a map; the other channels are zero.
    Evaluation labels are greedy expert actions, so those channels are never read.
    """

    def __init__(self, method, policy, r, **kw):
        self.fn, self.policy, self.r, self.kw = baselines.METHODS[method], policy, r, kw

    def __call__(self, states):
        states = np.asarray(states, dtype=np.float32)
        n, _, h, w = states.shape
        out = np.zeros((n, self.policy.n_actions, h, w), dtype=np.float32)
        for i, s in enumerate(states):
            a = int(np.argmax(self.policy.probabilities(s)))
            out[i, a] = self.fn(self.policy, s, a, r=self.r, **self.kw).values
        return out


def baseline_kwargs(method, cfg):
    if method == "rise":
        return {"n_masks": cfg["n_masks"], "cell_grid": cfg["cell_grid"], "p_keep": cfg["p_keep"],
                "seed": cfg["seed"]}
    if method == "blur":
        return {"stride": cfg["blur_stride"], "sigma": cfg["sigma"]}
    return {"patch": cfg["patch"], "stride": cfg["stride"]}


def cmd_evaluate(cfg):
    ckpts = find_checkpoints(cfg["checkpoint"])
    ds = open_dataset(cfg["dataset"])
    policy = load_expert(cfg["dataset"], ds)
    r = reference(ds, cfg["reference"])
    out = Path(cfg["out"])
    config.dump(cfg, "evaluate", out / "evaluate.config.ini")
    opts = {"fractions": cfg["fractions"], "step": cfg["step"] or None, "per_pixel": cfg["per_pixel_steps"],
            "theta": cfg["theta"], "top_r": cfg["regions"], "n_overlays": cfg["overlays"]}
    results = []
    for path in ckpts:
        model, meta = load_explainer(path)
        label = path.parent.name if path.name == "checkpoint.vmc" else path.stem
        results.append(evaluate_explainer(label, model, policy, ds, r, max_samples=cfg["max_samples"] or None,
                                          **opts))
        f = results[-1].fidelity
        print(f"{label}: accuracy {f['accuracy']:.4f} F1 {f['f1']:.4f}")
    emit_report(results, out, config={k: v for k, v in cfg.items()})
    if cfg["baselines"]:
        bcfg = {**config.BASELINE}
        for method in sorted(baselines.METHODS):
            provider = BaselineProvider(method, policy, r, **baseline_kwargs(method, bcfg))
            res = evaluate_explainer(method, provider, policy, ds, r, max_samples=cfg["baseline_samples"], **opts)
            emit_report([res], out / "baselines" / method, config={"method": method, **bcfg})
            print(f"baseline {method}: accuracy {res.fidelity['accuracy']:.4f}")
    print(f"report written to {out / 'report.json'}")


def cmd_explain(cfg):
    ds = open_dataset(cfg["dataset"])
    check_index(ds, cfg["index"])
    model, _ = open_checkpoint(cfg["checkpoint"])
    policy = load_expert(cfg["dataset"], ds)
    out = Path(cfg["out"])
    config.dump(cfg, "explain", out / "explain.config.ini")
    s = ds.states[cfg["index"]]
    masks = explain(model, s).masks
    paths = write_overlays(out, cfg["index"], s, masks, pattern="{index}_action{k}.ppm")
    probs = policy.probabilities(s)
    write_json(out / f"{cfg['index']}_explain.json", {
        "index": cfg["index"], "action": int(ds.actions[cfg["index"]]), "probabilities": probs.tolist(),
        "mask_mean": masks.mean(axis=(1, 2)).tolist(), "mask_max": masks.max(axis=(1, 2)).tolist(),
        "images": [p.name for p in paths]})
    print(f"wrote {len(paths)} overlays to {out}")


def cmd_counterfactual(cfg):
    ds = open_dataset(cfg["dataset"])
    check_index(ds, cfg["index"])
    model, _ = open_checkpoint(cfg["checkpoint"])
    policy = load_expert(cfg["dataset"], ds)
    r = reference(ds, cfg["reference"])
    out = Path(cfg["out"])
    config.dump(cfg, "counterfactual", out / "counterfactual.config.ini")
    s, a = ds.states[cfg["index"]], int(ds.actions[cfg["index"]])
    found = counterfactual(policy, s, explain(model, s).masks, a, r, cfg["theta"], cfg["regions"])
    rows = [c.summary() for c in found]
    write_json(out / f"{cfg['index']}_counterfactual.json",
               {"index": cfg["index"], "action": a, "theta": cfg["theta"], "regions": rows})
    for c in found:
        print(f"region {c.rank}: mass {c.mass:.3f}, {int(c.region.sum())} px, "
              f"action {c.original_action} -> {c.new_action}")
    if not found:
        print("no confident region: thresholded mask is empty")


def cmd_baseline(cfg):
    ds = open_dataset(cfg["dataset"])
    check_index(ds, cfg["index"])
    policy = load_expert(cfg["dataset"], ds)
    r = reference(ds, cfg["reference"])
    out = Path(cfg["out"])
    config.dump(cfg, "baseline", out / "baseline.config.ini")
    methods = sorted(baselines.METHODS) if cfg["method"] == "all" else [cfg["method"]]
    s = ds.states[cfg["index"]]
    a = int(ds.actions[cfg["index"]])
    for method in methods:
        if method not in baselines.METHODS:
            raise UsageError(f"unknown baseline {method!r}; choose from {sorted(baselines.METHODS)} or all")
        fn = baselines.METHODS[method]
        sal = fn(policy, s, a, r=r, **baseline_kwargs(method, cfg))
        stem = out / f"{cfg['index']}_{method}"
        sal.save(stem.with_suffix(".vmt"))
        write_overlays(out, cfg["index"], s, [sal.values], pattern="{index}_" + method + ".ppm")
        print(f"{method}: saliency written to {stem.with_suffix('.vmt')}")


COMMANDS = {
    "collect": cmd_collect,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "counterfactual": cmd_counterfactual,
    "baseline": cmd_baseline,
}


# -- argument parsing -------------------------------------------------------------

def _flag(p, name, kind=str, help=None, **kw):
    p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=kind, default=None, help=help, **kw)


def _switch(p, name, help):
    p.add_argument(f"--{name.replace('_', '-')}", dest=name, action="store_const", const=True, default=None,
                   help=help)


def build_parser():
    parser = argparse.ArgumentParser(prog="masklab", description="Action-wise saliency masks for RL policies.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help):
        p = sub.add_parser(name, help=help)
        _flag(p, "config", help="config file with [common] and per-command sections")
        _flag(p, "out", help="output directory (default $MASKLAB_OUT/<command> or runs/<command>)")
        _flag(p, "threads", int, help="worker thread cap (0 = one per CPU)")
        return p

    p = command("collect", "generate expert demonstrations")
    for name, kind in (("env", str), ("n", int), ("seed", int), ("width", int), ("height", int),
                       ("n_actions", int), ("n_beacons", int), ("beacon_size", int), ("policy", str),
                       ("policy_epochs", int)):
        _flag(p, name, kind)
    _switch(p, "force", "overwrite an existing dataset")

    p = command("train", "train explainers, one per seed")
    _flag(p, "dataset")
    _flag(p, "seed", str, help="single seed (same as --seeds with one value)")
    _flag(p, "seeds", help="comma-separated seeds")
    for name, kind in (("epochs", int), ("batch_size", int), ("learning_rate", float), ("lambda_e", float),
                       ("lambda_avg", float), ("lambda_smooth", float), ("lambda_l2", float), ("hidden", int),
                       ("reference", str)):
        _flag(p, name, kind)
    p.add_argument("--lr", dest="learning_rate", type=float, default=None, help="alias of --learning-rate")

    p = command("evaluate", "fidelity, insertion/deletion AUC and counterfactuals")
    _flag(p, "dataset")
    p.add_argument("--checkpoint", action="append", default=None, help="checkpoint file or directory; repeatable")
    for name, kind in (("fractions", str), ("step", int), ("theta", float), ("regions", int),
                       ("max_samples", int), ("overlays", int), ("baseline_samples", int), ("reference", str)):
        _flag(p, name, kind)
    _switch(p, "per_pixel_steps", "exact one-pixel-per-step curves")
    _switch(p, "baselines", "also evaluate every perturbation baseline")

    for name, help in (("explain", "write per-action mask overlays for one state"),
                       ("counterfactual", "remove top saliency regions and report action changes")):
        p = command(name, help)
        _flag(p, "dataset")
        _flag(p, "checkpoint")
        _flag(p, "index", int)
        _flag(p, "reference")
        if name == "counterfactual":
            _flag(p, "regions", int)
            _flag(p, "theta", float)

    p = command("baseline", "run a perturbation saliency method on one state")
    _flag(p, "dataset")
    _flag(p, "index", int)
    _flag(p, "reference")
    _flag(p, "method", help="rise, blur, occlusion, delta or all")
    for name, kind in (("patch", int), ("stride", int), ("n_masks", int), ("cell_grid", int), ("p_keep", float),
                       ("blur_stride", int), ("sigma", float), ("seed", int)):
        _flag(p, name, kind)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    if args.command == "train" and flags.get("seed") is not None:
        flags["seeds"] = flags.pop("seed")
    try:
        cfg = config.resolve(args.command, flags, args.config)
        set_threads(cfg["threads"])
        COMMANDS[args.command](cfg)
    except MissingCheckpoint as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_CHECKPOINT
    except TrainingFailure as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_NAN
    except (UsageError, configparser.Error) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except MasklabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
