"""Command-line front end.

    dpcap account --batch 1300000 --dataset-size 233000000 --sigma 0.728 --steps 5708
    dpcap plan eps-vs-n --batch 1300000 --sigma 0.728 --steps 5708 --dataset-sizes 23.3e6,233e6 -o eps.csv
    dpcap train --config toy.ini --seed 0
    dpcap eval --config toy.ini --checkpoint runs/checkpoint.bin
    dpcap simulate-tan --config toy.ini

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .accountant import CONVERSIONS, MechanismParams, QuadratureError, epsilon, solve_sigma
from .captioner import (
    PROMPT,
    Captioner,
    CaptionerConfig,
    SynthSpec,
    encode,
    generate_dataset,
    mean_loss,
    smoothed_gap,
    tan_equivalence_run,
    train,
)
from .dpsgd import DpSgdConfig, write_manifest
from .nncore import CheckpointError, load_checkpoint, save_checkpoint
from .planner import TrainPlan, effective_noise, epochs_vs_batch, eps_vs_dataset_size, tan_scale, write_csv

CONFIG_SCHEMA_VERSION = 1
OUTPUT_ENV = "DPCAP_OUTPUT_DIR"

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class ConfigError(Exception):
    pass


# section -> key -> (type, default); None default means "required or derived"
SCHEMA: dict[str, dict[str, tuple[type, object]]] = {
    "data": {
        "n": (int, 2000),
        "seed": (int, 0),
        "two_object_prob": (float, 0.3),
        "noise": (float, 0.05),
        "image_size": (int, 16),
        "patch_size": (int, 4),
        "max_len": (int, 12),
    },
    "model": {
        "enc_width": (int, 32),
        "enc_depth": (int, 2),
        "dec_width": (int, 32),
        "dec_depth": (int, 2),
        "heads": (int, 4),
        "mlp_ratio": (int, 4),
        "seed": (int, 0),
    },
    "dpsgd": {
        "private": (bool, True),
        "sigma": (float, None),
        "target_epsilon": (float, None),
        "batch_size": (int, 200),
        "clip": (float, 1.0),
        "lr": (float, 5.12e-4),
        "weight_decay": (float, 0.05),
        "warmup_frac": (float, 0.4),
        "decay_horizon_mult": (float, 2.0),
        "seed": (int, 0),
    },
    "train": {"steps": (int, 300)},
    "accountant": {"delta": (float, None), "conversion": (str, "improved")},
    "eval": {
        "probe_n": (int, 1200),
        "probe_k": (int, 10),
        "probe_reg": (float, 1e-2),
        "zeroshot_n": (int, 200),
        "seed": (int, 7),
    },
    "tan": {"k": (float, 4.0), "steps": (int, 200), "eval_n": (int, 100), "control_mult": (float, 2.0)},
}


def _parse_value(typ, raw: str, where: str):
    raw = raw.strip()
    if raw.lower() in ("", "none"):
        return None
    try:
        if typ is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {typ.__name__}") from exc


def load_config(path=None, overrides=()) -> dict[str, dict]:
    """Flat `key = value` sections; unknown sections or keys are errors."""
    cfg = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
    items = []
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            with open(path, encoding="utf-8") as f:
                cp.read_file(f)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for sec in cp.sections():
            for k, v in cp.items(sec):
                items.append((sec, k, v, f"{path}: [{sec}] {k}"))
    for ov in overrides:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise ConfigError(f"override {ov!r} must look like section.key=value")
        lhs, v = ov.split("=", 1)
        sec, k = lhs.strip().split(".", 1)
        items.append((sec, k, v, f"--set {lhs}"))
    for sec, k, v, where in items:
        if sec not in SCHEMA:
            raise ConfigError(f"{where}: unknown section [{sec}]")
        if k not in SCHEMA[sec]:
            raise ConfigError(f"{where}: unknown key {sec}.{k}")
        cfg[sec][k] = _parse_value(SCHEMA[sec][k][0], v, where)
    return cfg


def dump_config(cfg: dict[str, dict]) -> str:
    out = io.StringIO()
    for sec in SCHEMA:
        out.write(f"[{sec}]\n")
        for k in SCHEMA[sec]:
            v = cfg[sec][k]
            out.write(f"{k} = {'none' if v is None else repr(v) if isinstance(v, float) else v}\n")
        out.write("\n")
    return out.getvalue()


def synth_spec(cfg) -> SynthSpec:
    d = cfg["data"]
    try:
        return SynthSpec(image_size=d["image_size"], patch_size=d["patch_size"], two_object_prob=d["two_object_prob"],
                         noise=d["noise"], max_len=d["max_len"], seed=d["seed"])
    except ValueError as exc:
        raise ConfigError(f"[data] {exc}") from exc


def model_config(cfg, spec: SynthSpec) -> CaptionerConfig:
    m = cfg["model"]
    return CaptionerConfig(num_patches=spec.num_patches, patch_dim=spec.patch_dim, max_len=spec.max_len,
                           **{k: m[k] for k in ("enc_width", "enc_depth", "dec_width", "dec_depth", "heads",
                                                "mlp_ratio")})


def dpsgd_config(cfg) -> tuple[DpSgdConfig, float]:
    d, n, steps = cfg["dpsgd"], cfg["data"]["n"], cfg["train"]["steps"]
    delta = cfg["accountant"]["delta"] or 1.0 / n
    if d["batch_size"] > n:
        raise ConfigError(f"dpsgd.batch_size={d['batch_size']} exceeds data.n={n}")
    sigma = d["sigma"]
    if d["private"]:
        if (sigma is None) == (d["target_epsilon"] is None):
            raise ConfigError("set exactly one of dpsgd.sigma and dpsgd.target_epsilon for private training")
        if sigma is None:
            sigma = solve_sigma(d["target_epsilon"], d["batch_size"] / n, steps, delta,
                                conversion=cfg["accountant"]["conversion"])
    else:
        sigma = 0.0
    try:
        conf = DpSgdConfig(sigma=sigma, B=d["batch_size"], N=n, C=d["clip"], lr=d["lr"],
                           weight_decay=d["weight_decay"], warmup_frac=d["warmup_frac"],
                           decay_horizon_mult=d["decay_horizon_mult"], seed=d["seed"], private=d["private"])
    except ValueError as exc:
        raise ConfigError(f"[dpsgd] {exc}") from exc
    return conf, delta


def _out_dir(args) -> Path:
    out = Path(args.output_dir or os.environ.get(OUTPUT_ENV) or "runs")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve(args):
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides += [f"dpsgd.seed={args.seed}", f"model.seed={args.seed}"]
    return load_config(args.config, overrides)


# -- commands -------------------------------------------------------------------


def cmd_account(args) -> int:
    if args.q is not None and (args.batch is not None):
        raise ConfigError("give either --q or --batch/--dataset-size, not both")
    if args.q is None:
        if args.batch is None or args.dataset_size is None:
            raise ConfigError("need --q, or both --batch and --dataset-size")
        q = args.batch / args.dataset_size
    else:
        q = args.q
    delta = args.delta
    if delta is None:
        if args.dataset_size is None:
            raise ConfigError("need --delta or --dataset-size (delta = 1/N)")
        delta = 1.0 / args.dataset_size
    try:
        spec = epsilon(MechanismParams(args.sigma, q, args.steps, delta), conversion=args.conversion)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    print(f"epsilon = {spec.epsilon:.4g}")
    print(f"alpha = {spec.alpha:g}")
    print(f"delta = {delta:.4g}")
    print(f"q = {q:.6g}, sigma = {args.sigma:g}, steps = {args.steps}, conversion = {spec.conversion}")
    return EXIT_OK


def _floats(s: str) -> list[float]:
    try:
        return [float(x) for x in s.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad number list {s!r}") from exc


def cmd_plan(args) -> int:
    if args.kind == "eps-vs-n":
        rows = eps_vs_dataset_size(args.batch, args.sigma, args.steps, _floats(args.dataset_sizes),
                                   "1/N" if args.delta is None else args.delta)
        header, rows = ("N", "epsilon"), rows
    elif args.kind == "epochs-vs-batch":
        rows = epochs_vs_batch(args.epsilon, args.sigma, args.dataset_size, _floats(args.batches), args.delta)
        header = ("B", "steps", "epochs")
    else:
        if args.dataset_size != int(args.dataset_size) or args.batch != int(args.batch):
            raise ConfigError("plan tan needs whole-number --dataset-size and --batch")
        plan = TrainPlan(N=int(args.dataset_size), B=int(args.batch), sigma=args.sigma, steps=args.steps)
        scaled = tan_scale(plan, args.k)
        header = ("plan", "N", "B", "sigma", "steps", "effective_noise")
        rows = [(name, p.N, p.B, p.sigma, p.steps, effective_noise(p))
                for name, p in (("reference", plan), ("scaled", scaled.scaled))]
    try:
        write_csv(args.output, header, rows)
    except OSError as exc:
        print(f"error: cannot write {args.output}: {exc}", file=sys.stderr)
        return EXIT_IO
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(r)
    print(buf.getvalue(), end="")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    spec = synth_spec(cfg)
    conf, delta = dpsgd_config(cfg)
    steps = cfg["train"]["steps"]
    out = _out_dir(args)
    data = generate_dataset(spec, cfg["data"]["n"])
    model = Captioner(model_config(cfg, spec), seed=cfg["model"]["seed"])
    rows = []
    t0 = time.time()
    result = train(model, data, conf, steps, delta=delta, manifest_path=out / "manifest.json",
                   callback=lambda r: rows.append((r.step, r.batch_size, r.mean_loss, r.lr)))
    write_csv(out / "metrics.csv", ("step", "batch_size", "loss", "lr"), rows)
    save_checkpoint(out / "checkpoint.bin", model.store,
                    {"model": model.config.to_dict(), "data": cfg["data"], "schema": CONFIG_SCHEMA_VERSION})
    (out / "config.ini").write_text(dump_config(cfg))
    manifest = result.manifest
    manifest.update(config=cfg, threads=args.threads, version=__version__, schema=CONFIG_SCHEMA_VERSION)
    write_manifest(out / "manifest.json", manifest)
    eps = manifest["epsilon"]
    print(f"trained {steps} steps in {time.time() - t0:.1f}s; final batch loss {rows[-1][2]:.4f}; "
          f"epsilon = {'inf' if eps is None else f'{eps:.4g}'}")
    return EXIT_OK


def _zeroshot_accuracy(model, pairs, spec, threads: int):
    from .evaluate import LabelTrie, zeroshot_loss, zeroshot_tree

    labels = [(s, c) for s in spec.shapes for c in spec.colors]
    label_tokens = [encode([c, s]) for s, c in labels]
    trie = LabelTrie(label_tokens)
    prompt = encode(list(PROMPT))
    truth = [spec.class_of(p.objects[0][0], p.objects[0][1]) for p in pairs]

    def run(chunk):
        m = model.clone()
        return [(zeroshot_tree(m, p.image, prompt, trie), zeroshot_loss(m, p.image, prompt, label_tokens))
                for p in chunk]

    chunks = [pairs[i::threads] for i in range(threads)]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        parts = list(ex.map(run, chunks))
    preds = [None] * len(pairs)
    for i, part in enumerate(parts):
        for j, pr in enumerate(part):
            preds[i + j * threads] = pr
    tree = float(np.mean([p[0] == t for p, t in zip(preds, truth)]))
    loss = float(np.mean([p[1] == t for p, t in zip(preds, truth)]))
    return tree, loss, len(labels)


def cmd_eval(args) -> int:
    from .evaluate import linear_probe, write_eval_report

    cfg = _resolve(args)
    header, params = load_checkpoint(args.checkpoint)
    model = Captioner(CaptionerConfig(**header["model"]))
    model.store.load(params)
    spec = replace(synth_spec(cfg), two_object_prob=0.0, seed=cfg["eval"]["seed"])
    e = cfg["eval"]
    probe = generate_dataset(spec, e["probe_n"])
    x = np.stack([p.image for p in probe])
    y = np.array([spec.class_of(p.objects[0][0], p.objects[0][1]) for p in probe])
    seed = e["seed"]
    counts = np.bincount(y, minlength=spec.num_classes)
    if counts.min() <= e["probe_k"]:
        raise ConfigError(f"eval.probe_n={e['probe_n']} leaves a class with {counts.min()} examples; "
                          f"need more than eval.probe_k={e['probe_k']}")
    rows = []
    res = linear_probe(model.features(x), y, e["probe_k"], reg=e["probe_reg"], seed=seed,
                       num_classes=spec.num_classes)
    rows.append(("linear_probe", e["probe_k"], res.accuracy, res.n_eval, seed))
    base = Captioner(model.config, seed=cfg["model"]["seed"])
    res0 = linear_probe(base.features(x), y, e["probe_k"], reg=e["probe_reg"], seed=seed,
                        num_classes=spec.num_classes)
    rows.append(("linear_probe_untrained", e["probe_k"], res0.accuracy, res0.n_eval, seed))
    zs = generate_dataset(spec, e["zeroshot_n"], start=10**6)
    tree, loss, nlab = _zeroshot_accuracy(model, zs, spec, max(1, args.threads))
    rows.append(("zeroshot_tree", nlab, tree, len(zs), seed))
    rows.append(("zeroshot_loss", nlab, loss, len(zs), seed))
    out = _out_dir(args)
    write_eval_report(out / "eval_report.csv", rows)
    for r in rows:
        print(f"{r[0]:<24} k={r[1]:<4} accuracy={r[2]:.4f} n={r[3]}")
    return EXIT_OK


def cmd_simulate_tan(args) -> int:
    cfg = _resolve(args)
    spec = synth_spec(cfg)
    conf, _ = dpsgd_config(cfg)
    t = cfg["tan"]
    data = generate_dataset(spec, cfg["data"]["n"])
    ev = generate_dataset(spec, t["eval_n"], start=10**6)
    mcfg = model_config(cfg, spec)
    factory = lambda: Captioner(mcfg, seed=cfg["model"]["seed"])
    run = tan_equivalence_run(factory, data, conf, t["steps"], t["k"], eval_pairs=ev)
    control_model = factory()
    control = []
    train(control_model, data, replace(conf, sigma=conf.sigma * t["control_mult"]), t["steps"],
          callback=lambda r: control.append(mean_loss(control_model, ev)))
    out = _out_dir(args)
    write_csv(out / "tan.csv", ("step", "reference", "scaled", "control"),
              [(i, a, b, c) for i, (a, b, c) in enumerate(zip(run.reference, run.scaled, control))])
    gap, gap_c = smoothed_gap(run.reference, run.scaled), smoothed_gap(run.reference, control)
    print(f"reference B={run.reference_plan.B} sigma={run.reference_plan.sigma:g}; "
          f"scaled B={run.scaled_plan.scaled.B} sigma={run.scaled_plan.scaled.sigma:g}")
    print(f"smoothed gap scaled = {gap:.4f}, control (x{t['control_mult']:g} sigma) = {gap_c:.4f}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpcap", description="DP-SGD captioning toolkit")
    p.add_argument("--version", action="version",
                   version=f"dpcap {__version__} (config schema {CONFIG_SCHEMA_VERSION})")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("account", help="epsilon of a subsampled-Gaussian DP-SGD run")
    a.add_argument("--sigma", type=float, required=True)
    a.add_argument("--q", type=float)
    a.add_argument("--batch", type=float)
    a.add_argument("--dataset-size", type=float)
    a.add_argument("--steps", type=int, required=True)
    a.add_argument("--delta", type=float)
    a.add_argument("--conversion", choices=CONVERSIONS, default="improved")
    a.set_defaults(func=cmd_account)

    pl = sub.add_parser(
        "plan", help="trade-off tables as CSV",
        description="CSV schemas: eps-vs-n -> N,epsilon; epochs-vs-batch -> B,steps,epochs; "
                    "tan -> plan,N,B,sigma,steps,effective_noise. Header row, decimal point, no locale.")
    pl.add_argument("kind", choices=("eps-vs-n", "epochs-vs-batch", "tan"))
    pl.add_argument("-o", "--output", required=True)
    pl.add_argument("--batch", type=float)
    pl.add_argument("--sigma", type=float, required=True)
    pl.add_argument("--steps", type=int)
    pl.add_argument("--epsilon", type=float)
    pl.add_argument("--dataset-size", type=float)
    pl.add_argument("--dataset-sizes", help="comma-separated N values (eps-vs-n)")
    pl.add_argument("--batches", help="comma-separated B values (epochs-vs-batch)")
    pl.add_argument("--delta", type=float, help="fixed delta (default 1/N)")
    pl.add_argument("--k", type=float, default=1.0, help="TAN scale factor")
    pl.set_defaults(func=cmd_plan)

    for name, func, helptext in (("train", cmd_train, "train the toy captioner"),
                                 ("eval", cmd_eval, "zero-shot and linear-probe evaluation"),
                                 ("simulate-tan", cmd_simulate_tan, "paired TAN trajectories")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--config", help="key = value config file with [section] headers")
        c.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
        c.add_argument("--seed", type=int)
        c.add_argument("--output-dir", help=f"default: ${OUTPUT_ENV} or ./runs")
        c.add_argument("--threads", type=int, default=1)
        if name == "eval":
            c.add_argument("--checkpoint", required=True)
        c.set_defaults(func=func)
    return p


def _check_plan_args(args):
    need = {"eps-vs-n": ("batch", "steps", "dataset_sizes"),
            "epochs-vs-batch": ("epsilon", "dataset_size", "batches"),
            "tan": ("batch", "steps", "dataset_size")}[args.kind]
    missing = [n for n in need if getattr(args, n) is None]
    if missing:
        raise ConfigError(f"plan {args.kind} needs " + ", ".join("--" + m.replace("_", "-") for m in missing))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "plan":
            _check_plan_args(args)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (QuadratureError, OverflowError, ArithmeticError, ValueError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
