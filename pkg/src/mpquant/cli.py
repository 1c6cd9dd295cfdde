"""Command-line surface tying the pipeline together.

Subcommands: train, quantize-uniform, sensitivity, assign, nas, finetune,
eval, inspect. Every flag can also be supplied through a key=value config
file; precedence is flags > config file > built-in defaults. Failures exit
nonzero with a one-line machine-parseable error (exit codes: 0 ok,
2 config, 3 numeric, 4 I/O).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import admm, corpus, nas, packio, sensitivity, solver
from .errors import ConfigError, MpquantError
from .models import ModelSpec, build_model, cluster_layout, init_params
from .quant import BIT_WIDTHS, PrecisionAssignment, model_size_bytes

# Defaults mirror the training recipe; every key is also a config-file key.
DEFAULTS = {
    "kind": "lstm",
    "vocab_mode": "char",
    "vocab_size": 512,
    "embed_dim": 64,
    "hidden_dim": 64,
    "layers": 2,
    "heads": 2,
    "max_context": 64,
    "tie": "layer",
    "seq_len": 32,
    "batch_size": 32,
    "lr": 0.5,
    "momentum": 0.9,
    "epochs": 10,
    "steps_per_epoch": None,
    "gamma": 1e-3,
    "eta1": 0.02,
    "eta2": 0.001,
    "max_outer": 20,
    "max_inner": 20,
    "inner_tol": 1e-9,
    "steps_per_outer": None,
    "patience": 3,
    "seed": 0,
    "batches": 1,
    "hutchinson_m": 50,
    "search_steps": 400,
    "search_lr": 0.01,
    "outers": 3,
}

_INT_KEYS = {
    "vocab_size", "embed_dim", "hidden_dim", "layers", "heads", "max_context",
    "seq_len", "batch_size", "epochs", "steps_per_epoch", "max_outer",
    "max_inner", "steps_per_outer", "patience", "seed", "batches",
    "hutchinson_m", "search_steps", "outers",
}
_FLOAT_KEYS = {"lr", "momentum", "gamma", "eta1", "eta2", "inner_tol", "search_lr"}


def load_config_file(path) -> dict:
    """key=value lines; '#' starts a comment; unknown keys are rejected."""
    cfg = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            cfg[key] = val
    return cfg


def _coerce(key: str, val):
    if val is None or not isinstance(val, str):
        return val
    if val.lower() == "none":
        return None
    if key in _INT_KEYS:
        return int(val)
    if key in _FLOAT_KEYS:
        return float(val)
    return val


def resolve_options(args: argparse.Namespace) -> dict:
    """flags > config file > defaults."""
    file_cfg = load_config_file(args.config) if getattr(args, "config", None) else {}
    out = {}
    for key, default in DEFAULTS.items():
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            out[key] = _coerce(key, flag_val)
        elif key in file_cfg:
            out[key] = _coerce(key, file_cfg[key])
        else:
            out[key] = default
    return out


def _read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read text file {path}: {exc}") from exc


def _windows(vocab, text, seq_len):
    return corpus.make_windows(corpus.encode(vocab, text), seq_len)


def _admm_config(opt, **over):
    cfg = admm.ADMMConfig(
        gamma=opt["gamma"], eta1=opt["eta1"], eta2=opt["eta2"],
        max_outer=opt["max_outer"], max_inner=opt["max_inner"],
        inner_tol=opt["inner_tol"], batch_size=opt["batch_size"],
        seq_len=opt["seq_len"], steps_per_outer=opt["steps_per_outer"],
        patience=opt["patience"], seed=opt["seed"],
    )
    for k, v in over.items():
        setattr(cfg, k, v)
    return cfg


def _load_prototypes(proto_dir) -> tuple[sensitivity.PrototypeSet, dict]:
    proto_dir = Path(proto_dir)
    models, lams = {}, {}
    for n in BIT_WIDTHS:
        path = proto_dir / f"model_{n}bit.mpq"
        if not path.exists():
            raise ConfigError(f"missing prototype {path}")
        models[n] = packio.load_packed(path)
        sidecar = proto_dir / f"model_{n}bit.state.npz"
        if sidecar.exists():
            lams[n], _ = packio.load_admm_sidecar(sidecar)
    return sensitivity.PrototypeSet(models), lams


# -- subcommand handlers -------------------------------------------------------


def cmd_train(args):
    opt = resolve_options(args)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    text = _read_text(args.corpus)
    vocab = corpus.build_vocab(text, opt["vocab_mode"], max_size=opt["vocab_size"])
    spec = ModelSpec(
        kind=opt["kind"], vocab_size=vocab.size,
        embed_dim=opt["embed_dim"], hidden_dim=opt["hidden_dim"],
        num_layers=opt["layers"], num_heads=opt["heads"],
        max_context=opt["max_context"], tie_granularity=opt["tie"],
    )
    model = build_model(spec)
    tw, tm = _windows(vocab, text, opt["seq_len"])
    vw, vm = _windows(vocab, _read_text(args.val), opt["seq_len"])
    cfg = admm.BaselineConfig(
        lr=opt["lr"], momentum=opt["momentum"], epochs=opt["epochs"],
        batch_size=opt["batch_size"], steps_per_epoch=opt["steps_per_epoch"],
        patience=opt["patience"], seed=opt["seed"],
    )
    params, report = admm.train_baseline(model, init_params(spec, opt["seed"]), tw, tm, vw, vm, cfg)
    packio.save_checkpoint(outdir / "checkpoint.npz", spec, params, vocab)
    vocab.save(outdir / "vocab.txt")
    report.to_jsonl(outdir / "train_log.jsonl")
    print(f"checkpoint={outdir / 'checkpoint.npz'} val_ppl={report.iterations[-1]['val_ppl']:.4f}")
    return 0


def cmd_quantize_uniform(args):
    opt = resolve_options(args)
    if args.bits not in BIT_WIDTHS:
        raise ConfigError(f"--bits must be one of {BIT_WIDTHS}")
    spec, params, vocab = packio.load_checkpoint(args.checkpoint)
    model = build_model(spec)
    layout = cluster_layout(spec)
    assignment = PrecisionAssignment.uniform(layout, args.bits)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    out_path = outdir / f"model_{args.bits}bit.mpq"

    if args.method == "offline":
        qm = admm.offline_quantize(spec, params, assignment, _admm_config(opt))
        report = admm.TrainReport(method="offline")
    else:
        tw, tm = _windows(vocab, _read_text(args.corpus), opt["seq_len"])
        vw, vm = _windows(vocab, _read_text(args.val), opt["seq_len"])
        cfg = _admm_config(opt)
        if args.method == "admm":
            state_holder = {}
            qm, report = admm.train_quantized(
                model, params, assignment, tw, tm, vw, vm, cfg,
                method_label="admm", state_out=state_holder,
            )
            packio.save_admm_sidecar(
                outdir / f"model_{args.bits}bit.state.npz",
                state_holder["state"].lam,
                state_holder["state"].alphas,
            )
        elif args.method == "modbp":
            qm, report = admm.train_modbp(model, params, assignment, tw, tm, vw, vm, cfg)
        else:
            raise ConfigError(f"unknown method {args.method!r}")

    packio.save_packed(qm, out_path, packio.vocab_sha256(vocab))
    report.to_jsonl(outdir / f"model_{args.bits}bit.log.jsonl")
    size, ratio = qm.size_bytes()
    last_ppl = report.iterations[-1]["val_ppl"] if report.iterations else float("nan")
    print(f"model={out_path} bytes={size} compression={ratio:.2f} val_ppl={last_ppl:.4f}")
    return 0


def cmd_sensitivity(args):
    opt = resolve_options(args)
    spec, params, vocab = packio.load_checkpoint(args.checkpoint)
    model = build_model(spec)
    protos, _ = _load_prototypes(args.prototypes)
    tw, tm = _windows(vocab, _read_text(args.corpus), opt["seq_len"])
    method = {"kl": "kl", "hes": "hessian"}.get(args.method)
    if method is None:
        raise ConfigError(f"--method must be kl or hes, got {args.method!r}")
    sample = sensitivity.SampleSpec(opt["batches"], opt["batch_size"], opt["seed"])
    report = sensitivity.build_report(
        model, params, protos, method, sample, tw, tm,
        m=opt["hutchinson_m"], all_batches=args.all_data,
    )
    report.save(args.out)
    print(f"report={args.out} entries={len(report.entries)} method={method}")
    return 0


def cmd_assign(args):
    spec, _, _ = packio.load_checkpoint(args.checkpoint)
    layout = cluster_layout(spec)
    report = sensitivity.SensitivityReport.load(args.report)
    budget = solver.BudgetSpec(args.budget, hard_cap=not args.no_hard_cap)
    assignment = solver.solve(report, layout, budget)
    assignment.save(args.out, layout, note=f"method={report.method} budget={args.budget}")
    print(f"assignment={args.out} avg_bits={assignment.avg_bits(layout):.4f}")
    return 0


def cmd_nas(args):
    opt = resolve_options(args)
    spec, params, vocab = packio.load_checkpoint(args.checkpoint)
    model = build_model(spec)
    protos, _ = _load_prototypes(args.prototypes)
    tw, tm = _windows(vocab, _read_text(args.corpus), opt["seq_len"])
    assignment, beta, history = nas.search_for_target(
        model, protos, tw, tm, args.beta_target,
        steps=opt["search_steps"], lr=opt["search_lr"],
        batch_size=opt["batch_size"], seed=opt["seed"],
    )
    layout = cluster_layout(spec)
    assignment.save(args.out, layout, note=f"method=nas beta={beta}")
    if args.log:
        Path(args.log).write_text(
            "\n".join(json.dumps(h) for h in history) + "\n", encoding="utf-8"
        )
    print(f"assignment={args.out} avg_bits={assignment.avg_bits(layout):.4f} beta={beta:.5f}")
    return 0


def cmd_finetune(args):
    opt = resolve_options(args)
    spec, params, vocab = packio.load_checkpoint(args.checkpoint)
    model = build_model(spec)
    protos, lams = _load_prototypes(args.prototypes)
    assignment = PrecisionAssignment.load(args.assignment)
    tw, tm = _windows(vocab, _read_text(args.corpus), opt["seq_len"])
    vw, vm = _windows(vocab, _read_text(args.val), opt["seq_len"])
    qm, report = solver.finetune_assignment(
        model, params, protos, assignment, tw, tm, vw, vm,
        cfg=_admm_config(opt), outers=opt["outers"], lam_sources=lams or None,
    )
    packio.save_packed(qm, args.out, packio.vocab_sha256(vocab))
    size, ratio = qm.size_bytes()
    print(f"model={args.out} bytes={size} compression={ratio:.2f} "
          f"val_ppl={report.iterations[-1]['val_ppl']:.4f}")
    return 0


def _load_any_model(path):
    """Packed model or full-precision checkpoint -> (model, params, spec, meta)."""
    path = Path(path)
    if path.suffix == ".npz":
        spec, params, vocab = packio.load_checkpoint(path)
        return build_model(spec), params, spec, {"vocab": vocab, "packed": None}
    qm = packio.load_packed(path)
    return build_model(qm.spec), qm.param_vector(), qm.spec, {"vocab": None, "packed": qm}


def cmd_eval(args):
    opt = resolve_options(args)
    model, params, spec, meta = _load_any_model(args.model)
    vocab = meta["vocab"]
    if vocab is None:
        if not args.vocab:
            raise ConfigError("packed models need --vocab for evaluation")
        vocab = corpus.Vocab.load(args.vocab, opt["vocab_mode"])
        if meta["packed"] is not None:
            if packio.vocab_sha256(vocab) != bytes(meta["packed"].vocab_hash):
                raise ConfigError("vocab file does not match the packed model's vocab hash")
    if vocab.size != spec.vocab_size:
        raise ConfigError("vocab size does not match the model")
    text = _read_text(args.text)
    seq_len = min(opt["seq_len"], spec.max_context)
    windows, mask = _windows(vocab, text, seq_len)
    n_tokens = int(mask[:, 1:].sum())
    ppl = corpus.perplexity_windows(model, params, windows, mask)
    times = []
    for _ in range(3):
        t0 = time.perf_counter()
        corpus.perplexity_windows(model, params, windows, mask)
        times.append((time.perf_counter() - t0) / max(n_tokens, 1) * 1e3)
    if meta["packed"] is not None:
        size, ratio = meta["packed"].size_bytes()
    else:
        size, ratio = 4 * params.total_count, 1.0
    print(f"ppl={ppl:.4f} bytes={size} compression={ratio:.2f} ms_per_token={np.mean(times):.4f}")
    return 0


def cmd_inspect(args):
    qm = packio.load_packed(args.model)
    layout = cluster_layout(qm.spec)
    size, ratio = qm.size_bytes()
    spec = qm.spec
    print(f"format=MPQ1 kind={spec.kind} vocab={spec.vocab_size} embed={spec.embed_dim} "
          f"hidden={spec.hidden_dim} layers={spec.num_layers} heads={spec.num_heads} "
          f"max_context={spec.max_context} tie={spec.tie_granularity}")
    print(f"clusters={len(layout.clusters)} bytes={size} compression={ratio:.2f} "
          f"avg_bits={qm.assignment().avg_bits(layout):.4f} vocab_sha256={bytes(qm.vocab_hash).hex()}")
    print("cluster\tbits\tscale\tparams")
    for c in layout.clusters:
        qc = qm.clusters[c.cluster_id]
        print(f"{c.cluster_id}\t{qc.bits}\t{float(qc.scale32):.6g}\t{c.count}")
    return 0


# -- parser ---------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", help="key=value config file (flags override it)")
    p.add_argument("--seed", type=int)
    p.add_argument("--seq-len", dest="seq_len", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mpquant",
        description="Train, quantize, and evaluate low-bit LSTM/Transformer language models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the full-precision baseline")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--outdir", required=True)
    p.add_argument("--kind", choices=("lstm", "transformer"))
    p.add_argument("--vocab-mode", dest="vocab_mode", choices=("word", "char"))
    p.add_argument("--vocab-size", dest="vocab_size", type=int)
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--max-context", dest="max_context", type=int)
    p.add_argument("--tie", choices=("layer", "node"))
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("quantize-uniform", help="uniform-precision quantization")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bits", type=int, required=True)
    p.add_argument("--method", choices=("admm", "modbp", "offline"), default="admm")
    p.add_argument("--corpus")
    p.add_argument("--val")
    p.add_argument("--outdir", required=True)
    p.add_argument("--max-outer", dest="max_outer", type=int)
    p.add_argument("--steps-per-outer", dest="steps_per_outer", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--eta1", type=float)
    p.add_argument("--eta2", type=float)
    p.set_defaults(func=cmd_quantize_uniform)

    p = sub.add_parser("sensitivity", help="per-cluster sensitivity report")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prototypes", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--method", required=True, help="kl or hes")
    p.add_argument("--batches", type=int)
    p.add_argument("--hutchinson-m", dest="hutchinson_m", type=int)
    p.add_argument("--all-data", dest="all_data", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("assign", help="solve the budgeted assignment")
    p.add_argument("--report", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--budget", type=float, required=True)
    p.add_argument("--no-hard-cap", dest="no_hard_cap", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_assign)

    p = sub.add_parser("nas", help="architecture search for an assignment")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prototypes", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--beta-target", dest="beta_target", type=float, required=True)
    p.add_argument("--search-steps", dest="search_steps", type=int)
    p.add_argument("--search-lr", dest="search_lr", type=float)
    p.add_argument("--log")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_nas)

    p = sub.add_parser("finetune", help="stitch prototypes per assignment and fine-tune")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prototypes", required=True)
    p.add_argument("--assignment", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--outers", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--eta1", type=float)
    p.add_argument("--eta2", type=float)
    p.add_argument("--steps-per-outer", dest="steps_per_outer", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="perplexity, size, and timing of a model")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--vocab")
    p.add_argument("--vocab-mode", dest="vocab_mode", choices=("word", "char"))
    p.add_argument("--text", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="human-readable container dump")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MpquantError as exc:
        print(f"error code={exc.exit_code} type={type(exc).__name__} msg={exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error code=4 type=OSError msg={exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
