"""Command-line interface.

Subcommands: gen-data, train, eval, converge, gradcheck, attn-dump.

Options may come from a ``key=value`` config file (``--config``, '#' starts
a comment); explicit flags override file values, which override defaults.
Unknown keys are rejected. Every command is deterministic under a fixed
``--seed``: one seed feeds named sub-streams for data order, Gumbel noise,
parameter init, and dropout.

Exit codes: 0 success, 2 usage error, 3 I/O failure, 4 training divergence,
5 failed numerical check.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from sinkgraph import tape as tp
from sinkgraph.errors import DegenerateTrace, Divergence, SinkgraphError
from sinkgraph.graph import batch, load_dataset
from sinkgraph.model import (
    ModelConfig,
    edge_scores,
    encode_nodes,
    forward_graph,
    forward_node,
    init_params,
    loss_nll,
)
from sinkgraph.optim import load_checkpoint, save_checkpoint
from sinkgraph.sinkhorn import (
    TopRConfig,
    TopRMode,
    build_cost,
    build_marginals,
    estimate_rho,
    sinkhorn_init,
    sinkhorn_iterate,
)
from sinkgraph.synth import FeatMode, SynthConfig, write_dataset_files
from sinkgraph.tape import Tape, grad_check
from sinkgraph.train import (
    MetricsReport,
    Task,
    TrainConfig,
    collect_attention,
    evaluate,
    named_streams,
    separability_report,
    train,
)

SCHEMA_VERSION = 1


class UsageError(Exception):
    pass


def _load_config_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def _merge(args: argparse.Namespace, parser_defaults: dict) -> dict:
    """defaults < config file < explicit flags; unknown file keys rejected."""
    merged = dict(parser_defaults)
    file_values = _load_config_file(args.config) if getattr(args, "config", None) else {}
    for key, raw in file_values.items():
        if key not in parser_defaults:
            raise UsageError(f"unknown config key: {key}")
        default = parser_defaults[key]
        if isinstance(default, bool):
            merged[key] = raw.lower() in ("1", "true", "yes")
        elif isinstance(default, int):
            merged[key] = int(raw)
        elif isinstance(default, float):
            merged[key] = float(raw)
        else:
            merged[key] = raw
    for key in parser_defaults:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            merged[key] = flag_value
    return merged


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise UsageError(message)


# --- gen-data ---------------------------------------------------------------

_GEN_DEFAULTS = dict(
    bias=0.9, n_train=600, n_val=200, n_test=600, base_min=8, base_max=14,
    feat_mode="degree", feat_dim=11, seed=0, out="data",
)


def cmd_gen_data(opts: dict) -> int:
    _require(0.0 <= opts["bias"] <= 1.0, f"--bias {opts['bias']} outside [0, 1]")
    _require(opts["feat_mode"] in ("degree", "uniform"), "--feat-mode must be degree|uniform")
    _require(min(opts["n_train"], opts["n_val"], opts["n_test"]) > 0, "split sizes must be positive")
    _require(4 <= opts["base_min"] <= opts["base_max"], "need 4 <= base-min <= base-max")
    cfg = SynthConfig(
        bias_b=opts["bias"],
        n_train=opts["n_train"],
        n_val=opts["n_val"],
        n_test=opts["n_test"],
        base_size_range=(opts["base_min"], opts["base_max"]),
        feat_mode=FeatMode.DEGREE_ONE_HOT if opts["feat_mode"] == "degree" else FeatMode.UNIFORM_RANDOM,
        feat_dim=opts["feat_dim"],
        seed=opts["seed"],
    )
    meta = write_dataset_files(cfg, opts["out"])
    print(json.dumps({"written": str(Path(opts["out"])), "metadata": meta}))
    return 0


# --- train -------------------------------------------------------------------

_TRAIN_DEFAULTS = dict(
    data="data", out="run", r=0.5, tau=1.0, sigma=1.0, iters=10, mode="micro",
    ablate_gumbel=False, ablate_nodeattn=False, epochs=100, patience=10,
    batch_size=32, lr=1e-3, hidden=32, layers=2, dropout=0.3, readout="sum",
    task="graph", seed=0,
)


def _train_config_from(opts: dict, feat_dim: int, num_classes: int) -> TrainConfig:
    _require(0.0 < opts["r"] <= 1.0, f"--r {opts['r']} outside (0, 1]")
    _require(opts["tau"] > 0.0, f"--tau {opts['tau']} must be positive")
    _require(opts["sigma"] >= 0.0, f"--sigma {opts['sigma']} must be nonnegative")
    _require(opts["iters"] >= 1, "--iters must be >= 1")
    _require(opts["mode"] in ("micro", "macro"), "--mode must be micro|macro")
    _require(opts["task"] in ("graph", "node"), "--task must be graph|node")
    _require(opts["epochs"] >= 1 and opts["patience"] >= 1, "--epochs/--patience must be >= 1")
    _require(opts["batch_size"] >= 1, "--batch-size must be >= 1")
    _require(opts["lr"] > 0.0, "--lr must be positive")
    _require(opts["readout"] in ("sum", "mean"), "--readout must be sum|mean")
    _require(0.0 <= opts["dropout"] < 1.0, "--dropout outside [0, 1)")
    model = ModelConfig(
        feat_dim=feat_dim,
        hidden_dim=opts["hidden"],
        num_layers=opts["layers"],
        num_classes=num_classes,
        dropout_rate=opts["dropout"],
        topr=TopRConfig(
            r=opts["r"], tau=opts["tau"], sigma=opts["sigma"], n_iters=opts["iters"],
            mode=TopRMode.MICRO if opts["mode"] == "micro" else TopRMode.MACRO,
        ),
        ablate_gumbel=opts["ablate_gumbel"],
        ablate_node_attn=opts["ablate_nodeattn"],
        readout=opts["readout"],
    )
    return TrainConfig(
        model=model,
        epochs=opts["epochs"],
        batch_size=opts["batch_size"],
        learning_rate=opts["lr"],
        patience=opts["patience"],
        seed=opts["seed"],
        task=Task.GRAPH_LEVEL if opts["task"] == "graph" else Task.NODE_LEVEL,
    )


def _model_config_dict(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg.model)
    d["topr"]["mode"] = cfg.model.topr.mode.value
    return {
        "schema_version": SCHEMA_VERSION,
        "model": d,
        "task": cfg.task.value,
        "seed": cfg.seed,
    }


def _model_config_from_dict(obj: dict) -> tuple[ModelConfig, Task]:
    m = dict(obj["model"])
    t = dict(m.pop("topr"))
    t["mode"] = TopRMode(t["mode"])
    model = ModelConfig(topr=TopRConfig(**t), **m)
    return model, Task(obj["task"])


def cmd_train(opts: dict) -> int:
    data_dir = Path(opts["data"])
    train_ds = load_dataset(data_dir / "train.jsonl")
    val_ds = load_dataset(data_dir / "val.jsonl")
    feat_dim = train_ds[0].graph.feat_dim
    if opts["task"] == "node":
        num_classes = 2
    else:
        num_classes = int(max(ex.label for ex in train_ds + val_ds)) + 1
    cfg = _train_config_from(opts, feat_dim, num_classes)
    if cfg.model.topr.r == 1.0:
        print("ERM-degenerate mode: r=1, all edge attention fixed to 1", file=sys.stderr)
    store, history = train(train_ds, val_ds, cfg)
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.bin", store)
    with open(out / "model_config.json", "w", encoding="utf-8") as fh:
        json.dump(_model_config_dict(cfg), fh, indent=2, sort_keys=True)
    with open(out / "history.json", "w", encoding="utf-8") as fh:
        json.dump({"schema_version": SCHEMA_VERSION, **history}, fh, indent=2, sort_keys=True)
    print(json.dumps({
        "best_epoch": history["best_epoch"],
        "final_val_accuracy": history["best_val_accuracy"],
    }))
    return 0


# --- eval --------------------------------------------------------------------

_EVAL_DEFAULTS = dict(checkpoint="run", data="data/test.jsonl", out="", seed=0)


def cmd_eval(opts: dict) -> int:
    ckpt_dir = Path(opts["checkpoint"])
    store = load_checkpoint(ckpt_dir / "checkpoint.bin")
    with open(ckpt_dir / "model_config.json", "r", encoding="utf-8") as fh:
        model, task = _model_config_from_dict(json.load(fh))
    dataset = load_dataset(opts["data"])
    cfg = TrainConfig(model=model, task=task, seed=opts["seed"])
    report = evaluate(store, dataset, cfg)
    payload = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if opts["out"]:
        Path(opts["out"]).write_text(payload + "\n", encoding="utf-8")
    else:
        print(payload)
    return 0


# --- converge ------------------------------------------------------------------

_CONVERGE_DEFAULTS = dict(m=20, r=0.3, tau=1.0, trials=100, iters=20, seed=0, out="", jobs=1)


def _one_trial(args) -> tuple[float, float, np.ndarray]:
    m, r, tau, iters, seed = args
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=m)
    plan = sinkhorn_init(build_cost(tp.tensor(scores)), tau)
    R, C = build_marginals(m, r)
    _, trace = sinkhorn_iterate(plan, R, C, iters)
    rho, r2 = estimate_rho(trace)
    return rho, r2, trace.row_residuals


def cmd_converge(opts: dict) -> int:
    _require(opts["m"] >= 1, "--m must be >= 1")
    _require(0.0 < opts["r"] <= 1.0, "--r outside (0, 1]")
    _require(opts["tau"] > 0.0, "--tau must be positive")
    _require(opts["trials"] >= 1, "--trials must be >= 1")
    _require(opts["iters"] >= 1, "--iters must be >= 1")
    seeds = np.random.SeedSequence(opts["seed"]).spawn(opts["trials"])
    jobs = [(opts["m"], opts["r"], opts["tau"], opts["iters"], s) for s in seeds]
    if opts["jobs"] > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=opts["jobs"]) as pool:
            results = list(pool.map(_one_trial, jobs))
    else:
        results = [_one_trial(j) for j in jobs]
    rhos = np.array([r for r, _, _ in results])
    r2s = np.array([q for _, q, _ in results])
    if opts["out"]:
        with open(opts["out"], "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["trial", "rho_hat", "fit_r2"] + [f"residual_{k+1}" for k in range(opts["iters"])]
            )
            for t, (rho, r2, res) in enumerate(results):
                writer.writerow([t, f"{rho:.12g}", f"{r2:.12g}"] + [f"{x:.12g}" for x in res])
    summary = {
        "schema_version": SCHEMA_VERSION,
        "trials": opts["trials"],
        "rho_quantiles": {
            q: float(np.quantile(rhos, float(q))) for q in ("0.0", "0.25", "0.5", "0.75", "1.0")
        },
        "fit_r2_min": float(r2s.min()),
        "all_contracting": bool((rhos < 1.0).all()),
    }
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


# --- gradcheck -----------------------------------------------------------------

_GRADCHECK_DEFAULTS = dict(m=8, tau=1.0, tol=1e-4, seed=0)


def _toy_batch(rng: np.random.Generator, feat_dim: int = 4):
    from sinkgraph.graph import LabeledExample, new_graph

    examples = []
    for label in (0, 1):
        n = int(rng.integers(5, 8))
        edges = [(i, i + 1) for i in range(n - 1)]
        edges.append((0, n - 1))
        feats = rng.normal(size=(n, feat_dim))
        examples.append(LabeledExample(new_graph(n, edges, feats), label))
    return batch(examples)


def cmd_gradcheck(opts: dict) -> int:
    _require(opts["m"] >= 1, "--m must be >= 1")
    _require(opts["tau"] > 0.0, "--tau must be positive")
    _require(opts["tol"] > 0.0, "--tol must be positive")
    rng = np.random.default_rng(opts["seed"])
    checks = {}

    from sinkgraph.sinkhorn import soft_top_r

    m = opts["m"]
    weights = tp.tensor(rng.normal(size=m))
    cfg = TopRConfig(r=0.5 if m == 1 else (m // 2) / m, tau=opts["tau"], sigma=0.0, n_iters=10)
    segments = np.zeros(m, dtype=np.int64)

    def attention_scalar(scores):
        return (soft_top_r(scores, segments, cfg) * weights).sum()

    report = grad_check(attention_scalar, rng.normal(size=m), tol=opts["tol"])
    checks["soft_top_r"] = report

    gb = _toy_batch(rng)
    model = ModelConfig(
        feat_dim=4, hidden_dim=6, num_layers=2, num_classes=2, dropout_rate=0.0,
        topr=TopRConfig(r=0.5, tau=opts["tau"], sigma=0.0, n_iters=10),
    )
    store = init_params(model, rng)
    tcfg = TrainConfig(model=model)

    for name in store.params:

        def loss_of(x, _name=name):
            old = store.params[_name]
            store.params[_name] = x
            try:
                logits, _, _ = forward_graph(gb, store, model, train_mode=True)
                return loss_nll(logits, gb.labels)
            finally:
                store.params[_name] = old

        rep = grad_check(loss_of, store.params[name].data, tol=opts["tol"])
        checks[f"loss/{name}"] = rep

    failed = {k: r for k, r in checks.items() if not r.passed}
    print(json.dumps({
        "schema_version": SCHEMA_VERSION,
        "tol": opts["tol"],
        "checks": {k: {"max_rel_err": r.max_rel_err, "passed": r.passed} for k, r in checks.items()},
        "passed": not failed,
    }, indent=2, sort_keys=True))
    return 0 if not failed else 5


# --- attn-dump -----------------------------------------------------------------

_ATTN_DEFAULTS = dict(checkpoint="run", data="data/test.jsonl", out="attn", limit=0)


def cmd_attn_dump(opts: dict) -> int:
    ckpt_dir = Path(opts["checkpoint"])
    store = load_checkpoint(ckpt_dir / "checkpoint.bin")
    with open(ckpt_dir / "model_config.json", "r", encoding="utf-8") as fh:
        model, task = _model_config_from_dict(json.load(fh))
    dataset = load_dataset(opts["data"])
    if opts["limit"] > 0:
        dataset = dataset[: opts["limit"]]
    cfg = TrainConfig(model=model, task=task)
    out_prefix = Path(opts["out"])
    out_prefix.parent.mkdir(parents=True, exist_ok=True)

    topr = model.topr
    with open(out_prefix.with_suffix(".jsonl"), "w", encoding="utf-8", newline="\n") as fh:
        for i in range(0, len(dataset), 256):
            part = dataset[i : i + 256]
            gb = batch(part)
            if task is Task.GRAPH_LEVEL:
                _, alpha_e, alpha_v = forward_graph(gb, store, model, train_mode=False)
            else:
                logits, alpha_e = forward_node(gb, store, model, train_mode=False)
                from sinkgraph.sinkhorn import node_attention

                alpha_v = node_attention(gb, alpha_e)
            scores = None
            if topr.r < 1.0:
                emb = encode_nodes(gb, store, model, train_mode=False)
                scores = edge_scores(emb, gb, store, train_mode=False).data
            for g in range(gb.num_graphs):
                e0, e1 = gb.edge_offsets[g], gb.edge_offsets[g + 1]
                n0, n1 = gb.node_offsets[g], gb.node_offsets[g + 1]
                if scores is None or e1 == e0:
                    trace: list[float] = []
                else:
                    plan = sinkhorn_init(build_cost(tp.tensor(scores[e0:e1])), topr.tau)
                    R, C = build_marginals(int(e1 - e0), topr.r)
                    _, tr = sinkhorn_iterate(plan, R, C, topr.n_iters)
                    trace = [float(x) for x in tr.row_residuals]
                fh.write(json.dumps({
                    "edge_attn": [float(x) for x in alpha_e.data[e0:e1]],
                    "node_attn": [float(x) for x in alpha_v.data[n0:n1]],
                    "trace": trace,
                }) + "\n")

    pairs = collect_attention(store, dataset, cfg)
    if all(mask is not None for _, mask in pairs):
        rep = separability_report(pairs)
        hist_path = out_prefix.parent / (out_prefix.name + "_hist.csv")
        with open(hist_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_left", "count_background", "count_explanation"])
            for k in range(len(rep.counts_background)):
                writer.writerow([
                    f"{rep.bin_edges[k]:.6g}",
                    int(rep.counts_background[k]),
                    int(rep.counts_explanation[k]),
                ])
        print(json.dumps({"overlap": rep.overlap, "graphs": len(pairs)}))
    else:
        print(json.dumps({"overlap": None, "graphs": len(pairs)}))
    return 0


# --- parser / dispatch -----------------------------------------------------------

_COMMANDS = {
    "gen-data": (_GEN_DEFAULTS, cmd_gen_data),
    "train": (_TRAIN_DEFAULTS, cmd_train),
    "eval": (_EVAL_DEFAULTS, cmd_eval),
    "converge": (_CONVERGE_DEFAULTS, cmd_converge),
    "gradcheck": (_GRADCHECK_DEFAULTS, cmd_gradcheck),
    "attn-dump": (_ATTN_DEFAULTS, cmd_attn_dump),
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sinkgraph",
        description="soft top-r subgraph attention: data generation, training, diagnostics",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command, (defaults, _) in _COMMANDS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", help="key=value config file; flags override")
        for key, default in defaults.items():
            flag = "--" + key.replace("_", "-")
            if isinstance(default, bool):
                p.add_argument(flag, action="store_const", const=True, default=None)
            elif isinstance(default, int):
                p.add_argument(flag, type=int, default=None)
            elif isinstance(default, float):
                p.add_argument(flag, type=float, default=None)
            else:
                p.add_argument(flag, type=str, default=None)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    defaults, handler = _COMMANDS[args.command]
    try:
        opts = _merge(args, defaults)
    except (UsageError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    try:
        return handler(opts)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Divergence as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return 4
    except DegenerateTrace as e:
        print(f"error: degenerate trace: {e}", file=sys.stderr)
        return 5
    except (FileNotFoundError, NotADirectoryError, PermissionError, IsADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except SinkgraphError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
