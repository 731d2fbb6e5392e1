"""Command-line entry point: ``densformer <command> [options]``.

Every command writes CSV files whose first line is a ``# config-fingerprint``
comment followed by a header row.  Options may also come from a
``key = value`` config file (``--config``); flags on the command line win.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 missing artifact.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISSING = 0, 2, 3, 4
OUT_ENV = "DENSFORMER_OUT"

log = logging.getLogger("densformer")


class ConfigError(ValueError):
    pass


# -- config files and output -----------------------------------------------------


def read_config(path: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            out[key.replace("-", "_")] = value
    return out


def fingerprint(args: argparse.Namespace) -> tuple[str, str]:
    items = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out", "plot")}
    blob = json.dumps(items, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16], blob


def output_path(args, name: str) -> str:
    out = args.out or os.environ.get(OUT_ENV) or "."
    os.makedirs(out, exist_ok=True)
    return os.path.join(out, name)


def write_csv(path: str, rows: list[dict], args) -> None:
    fp, blob = fingerprint(args)
    fields = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        fh.write(f"# config-fingerprint: {fp} {blob}\n")
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})
    log.info("wrote %s", path)


def svg_line_chart(path, x, series: dict, xlabel="", ylabel="", logx=False, logy=False, title="") -> None:
    """Minimal line chart; ``series`` maps label -> y values."""
    W, H, pad = 640, 400, 56
    tx = np.log10 if logx else (lambda v: np.asarray(v, float))
    ty = np.log10 if logy else (lambda v: np.asarray(v, float))
    xs = tx(np.asarray(x, float))
    ys = {k: ty(np.asarray(v, float)) for k, v in series.items()}
    allv = np.concatenate(list(ys.values())) if ys else np.zeros(1)
    x0, x1 = float(xs.min()), float(xs.max()) or 1.0
    y0, y1 = float(allv.min()), float(allv.max())
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    px = lambda v: pad + (v - x0) / (x1 - x0) * (W - 2 * pad)
    py = lambda v: H - pad - (v - y0) / (y1 - y0) * (H - 2 * pad)
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<line x1="{pad}" y1="{H - pad}" x2="{W - pad}" y2="{H - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{H - pad}" stroke="black"/>',
        f'<text x="{W / 2}" y="{H - 12}" text-anchor="middle">{xlabel}{" (log10)" if logx else ""}</text>',
        f'<text x="14" y="{H / 2}" transform="rotate(-90 14 {H / 2})" text-anchor="middle">{ylabel}{" (log10)" if logy else ""}</text>',
        f'<text x="{W / 2}" y="20" text-anchor="middle">{title}</text>',
        f'<text x="{pad}" y="{H - pad + 16}" text-anchor="middle">{x0:.3g}</text>',
        f'<text x="{W - pad}" y="{H - pad + 16}" text-anchor="middle">{x1:.3g}</text>',
        f'<text x="{pad - 4}" y="{H - pad}" text-anchor="end">{y0:.3g}</text>',
        f'<text x="{pad - 4}" y="{pad + 4}" text-anchor="end">{y1:.3g}</text>',
    ]
    for i, (label, yv) in enumerate(ys.items()):
        c = colors[i % len(colors)]
        pts = " ".join(f"{px(a):.1f},{py(b):.1f}" for a, b in zip(xs, yv))
        parts.append(f'<polyline fill="none" stroke="{c}" stroke-width="2" points="{pts}"/>')
        parts.append(f'<text x="{W - pad - 120}" y="{pad + 16 * (i + 1)}" fill="{c}">{label}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))


def _load_weights(path):
    from .checkpoint import load_checkpoint

    if not path:
        raise ConfigError("this oracle needs --checkpoint")
    weights, _, _ = load_checkpoint(path)
    return weights.to(__import__("torch").float64)


def _dist(args):
    """Resolve ``--dist`` (``laplace2d`` is shorthand for ``laplace`` with d=2)."""
    if args.dist.endswith("2d"):
        return args.dist[:-2], 2
    return args.dist, args.d


def _mean_by(rows, key):
    out = {}
    for r in rows:
        out.setdefault(r[key], []).append(r["mse"])
    return {k: float(np.mean(v)) for k, v in out.items()}


# -- commands --------------------------------------------------------------------


def cmd_train(args):
    from .gmm import BatchConfig
    from .model import ModelConfig
    from .training import TrainConfig, train

    dims = tuple(args.d) if len(args.d) > 1 else args.d[0]
    mc = ModelConfig(
        width=args.width, layers=args.layers, heads=args.heads, ffn_mult=args.ffn_mult,
        dropout=args.dropout, d_max=args.d_max, decoder_layers=args.decoder_layers,
        head_mode=args.head_mode,
    )
    bc = BatchConfig(
        B=args.batch, d=dims, n_x=args.n_x, n_y=args.n_y, k_min=args.k_min, k_max=args.k_max,
        mean_scale=args.mean_scale, cov_scheme=args.cov_scheme, cov_noise=args.cov_noise,
    )
    tc = TrainConfig(
        alpha=args.alpha, steps=args.steps, lr=args.lr, batch=bc, seed=args.seed,
        checkpoint_every=args.checkpoint_every, log_space=not args.raw_density, dtype=args.dtype,
    )
    out = args.out or os.environ.get(OUT_ENV) or "."
    evaluate = None
    if args.eval_heldout:
        from .evaluation import heldout_score_suite, suite_score_mse
        from .model import predict

        d0 = bc.dim_for(0)
        suites = [heldout_score_suite(s, n=bc.n_x, k_range=(bc.k_min, bc.k_max), d=d0) for s in range(5)]
        evaluate = lambda w: float(np.median([suite_score_mse(lambda X: predict(w, X).scores, s) for s in suites]))
    res = train(mc, tc, out_dir=out, resume=args.resume, evaluate=evaluate)
    if res.history:
        print(f"final step {res.history[-1][0]}  loss {res.history[-1][3]:.5f}  checkpoints in {out}")
    return EXIT_OK


def cmd_eval_score(args):
    from .evaluation import eval_score

    dist, d = _dist(args)
    weights = _load_weights(args.checkpoint) if args.oracle in ("transformer", "sd-kde-learned", "sd-kde-autograd") else None
    rows = eval_score(args.oracle, dist, d, args.n, args.modes, range(args.seeds), weights=weights, rule=args.bandwidth)
    write_csv(output_path(args, "eval_score.csv"), rows, args)
    means = _mean_by(rows, "n")
    for n, v in means.items():
        print(f"{args.oracle}\t{dist}\td={d}\tn={n}\tmse={v:.4f}")
    if args.plot:
        svg_line_chart(output_path(args, "eval_score.svg"), list(means), {args.oracle: list(means.values())}, "n", "score MSE", True, True)
    return EXIT_OK


def cmd_eval_density(args):
    from .evaluation import eval_density

    dist, d = _dist(args)
    weights = _load_weights(args.checkpoint) if args.oracle in ("transformer", "sd-kde-learned", "sd-kde-autograd") else None
    rows = eval_density(args.oracle, dist, d, args.n, args.modes, range(args.seeds), weights=weights, rule=args.bandwidth)
    write_csv(output_path(args, "eval_density.csv"), rows, args)
    means = _mean_by(rows, "n")
    for n, v in means.items():
        print(f"{args.oracle}\t{dist}\td={d}\tn={n}\tmse={v:.6g}")
    if args.plot:
        svg_line_chart(output_path(args, "eval_density.svg"), list(means), {args.oracle: list(means.values())}, "n", "density MSE", True, True)
    return EXIT_OK


def _functional_inputs(args, need):
    """Sample and oracle values (log-densities or scores) for entropy/fisher."""
    from . import kde as K
    from .estimators import gaussian_entropy
    from .evaluation import density_estimates, make_target, score_estimates
    from .model import predict

    dist, d = _dist(args)
    rng = np.random.default_rng(args.seed)
    tgt = make_target(dist, d, rng, modes=args.modes[0])
    X = tgt.sample(args.n[0], rng)
    if args.oracle == "exact":
        vals = tgt.log_density(X) if need == "log_density" else tgt.score(X)
    elif args.oracle == "transformer":
        est = predict(_load_weights(args.checkpoint), X)
        vals = est.log_densities if need == "log_density" else est.scores
    elif need == "log_density":
        vals = np.log(density_estimates(args.oracle, X, X, weights=None, rule=args.bandwidth, true_score=tgt.score))
    else:
        vals = score_estimates(args.oracle, X, X, rule=args.bandwidth)
    truth = None
    if dist == "gaussian":
        truth = gaussian_entropy(np.eye(d)) if need == "log_density" else float(d)
    return vals, truth, tgt


def cmd_entropy(args):
    from .estimators import entropy_from_log

    vals, truth, tgt = _functional_inputs(args, "log_density")
    est = entropy_from_log(vals)
    row = {"functional": "entropy", "oracle": args.oracle, "dist": tgt.name, "estimate": est.value, "stderr": est.stderr, "n": est.n, "truth": truth if truth is not None else ""}
    write_csv(output_path(args, "entropy.csv"), [row], args)
    print(f"entropy[{args.oracle}] = {est.value:.5f} +/- {est.stderr:.5f}" + (f"  (truth {truth:.5f})" if truth is not None else ""))
    return EXIT_OK


def cmd_fisher(args):
    from .estimators import fisher_information

    vals, truth, tgt = _functional_inputs(args, "score")
    est = fisher_information(vals)
    row = {"functional": "fisher", "oracle": args.oracle, "dist": tgt.name, "estimate": est.value, "stderr": est.stderr, "n": est.n, "truth": truth if truth is not None else ""}
    write_csv(output_path(args, "fisher.csv"), [row], args)
    print(f"fisher[{args.oracle}] = {est.value:.5f} +/- {est.stderr:.5f}" + (f"  (truth {truth:.5f})" if truth is not None else ""))
    return EXIT_OK


def cmd_rfi(args):
    """I(g | f) with f = N(0, I) and g = N(shift * 1, I); g's score is
    estimated from a sample of g and evaluated at samples of f."""
    from .estimators import relative_fisher
    from .evaluation import score_estimates

    d = args.d
    rng = np.random.default_rng(args.seed)
    n = args.n[0]
    m = np.full(d, args.shift)
    Xf = rng.standard_normal((n, d))
    Yg = rng.standard_normal((n, d)) + m
    sf = -Xf
    if args.oracle == "exact":
        sg = -(Xf - m)
    elif args.oracle == "transformer":
        from .model import predict

        sg = predict(_load_weights(args.checkpoint), Yg, Xf).scores
    else:
        sg = score_estimates(args.oracle, Yg, Xf, rule=args.bandwidth)
    est = relative_fisher(sg, sf)
    truth = float(m @ m)
    write_csv(output_path(args, "rfi.csv"), [{"functional": "relative_fisher", "oracle": args.oracle, "estimate": est.value, "stderr": est.stderr, "n": est.n, "truth": truth}], args)
    print(f"rfi[{args.oracle}] = {est.value:.5f} +/- {est.stderr:.5f}  (truth {truth:.5f})")
    return EXIT_OK


def cmd_landau(args):
    from .landau import LandauConfig, make_oracle, simulate

    cfg = LandauConfig(gamma=args.gamma, dt=args.dt, steps=args.steps, n=args.n_particles, d=len(args.init_var), oracle=args.oracle, init_var=tuple(args.init_var), seed=args.seed)
    weights = _load_weights(args.checkpoint) if args.oracle == "transformer" else None
    traj = simulate(cfg, make_oracle(args.oracle, weights))
    path = output_path(args, "landau.csv")
    fp, blob = fingerprint(args)
    traj.write_csv(path, comment=f"config-fingerprint: {fp} {blob}")
    print(f"landau[{args.oracle}, gamma={args.gamma}] trace drift {abs(np.trace(traj.cov[-1]) / np.trace(traj.cov[0]) - 1):.2e}  cov11 {traj.cov[0, 0, 0]:.4f} -> {traj.cov[-1, 0, 0]:.4f}")
    if args.plot:
        svg_line_chart(output_path(args, "landau.svg"), traj.t, {"cov11": traj.cov[:, 0, 0]}, "t", "Sigma_11")
    return EXIT_OK


def cmd_bench(args):
    from .evaluation import bench
    from .model import ModelConfig, init_weights

    weights = _load_weights(args.checkpoint) if args.checkpoint else init_weights(ModelConfig())
    ns = tuple(2**k for k in range(args.log2_min, args.log2_max + 1))
    rows, slopes = bench(args.d, ns, weights, repeats=args.repeats, seed=args.seed)
    write_csv(output_path(args, f"bench_d{args.d}.csv"), rows, args)
    for r in rows:
        print(f"n={r['n']}\tkde={r['kde_seconds']:.4f}s\ttransformer={r['transformer_seconds']:.4f}s")
    print("log-log slopes: " + ", ".join(f"{k}={v:.2f}" for k, v in slopes.items()))
    if args.plot:
        svg_line_chart(output_path(args, f"bench_d{args.d}.svg"), ns, {"kde": [r["kde_seconds"] for r in rows], "transformer": [r["transformer_seconds"] for r in rows]}, "n", "seconds", True, True)
    return EXIT_OK


def cmd_export_attention(args):
    from .evaluation import make_target
    from .model import export_attention

    weights = _load_weights(args.checkpoint)
    dist, d = _dist(args)
    rng = np.random.default_rng(args.seed)
    X = make_target(dist, d, rng, modes=args.modes[0]).sample(args.n[0], rng)
    res = export_attention(weights, X, layer=args.layer)
    np.savez(output_path(args, f"attention_layer{args.layer}.npz"), points=X, heads=res["heads"], mean=res["mean"], kde=res["kde"])
    rows = [{"layer": args.layer, "head": h, "row_sum_max_dev": float(np.abs(res["heads"][h].sum(1) - 1).max())} for h in range(res["heads"].shape[0])]
    rows.append({"layer": args.layer, "head": "mean", "row_sum_max_dev": float(np.abs(res["mean"].sum(1) - 1).max())})
    write_csv(output_path(args, f"attention_layer{args.layer}.csv"), rows, args)
    print(f"layer {args.layer}: correlation(mean attention, KDE matrix) = {res['correlation']:.4f}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def _common(p, n_default=(2048,)):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or .)")
    p.add_argument("--plot", action="store_true", help="also write an SVG line chart")
    p.add_argument("--checkpoint")
    p.add_argument("--bandwidth", default="silverman", choices=["silverman", "silverman-factor"])
    p.add_argument("--dist", default="gmm", choices=["gmm", "gaussian", "laplace", "laplace2d", "gmm2d", "gaussian2d"])
    p.add_argument("--d", type=int, default=1)
    p.add_argument("--n", type=int, nargs="+", default=list(n_default))
    p.add_argument("--modes", type=int, nargs="+", default=[3])
    p.add_argument("--seeds", type=int, default=5)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="densformer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the transformer on GMM batches")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--plot", action="store_true")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--steps", type=int, default=20000)
    p.add_argument("--d", type=int, nargs="+", default=[1], help="one dimension, or several to cycle through")
    p.add_argument("--n-x", type=int, default=256)
    p.add_argument("--n-y", type=int, default=None)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--k-min", type=int, default=1)
    p.add_argument("--k-max", type=int, default=10)
    p.add_argument("--mean-scale", type=float, default=3.0)
    p.add_argument("--cov-scheme", default="diagonal", choices=["diagonal", "wishart"])
    p.add_argument("--cov-noise", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--raw-density", action="store_true", help="regress densities instead of log-densities")
    p.add_argument("--checkpoint-every", type=int, default=1000)
    p.add_argument("--dtype", default="float32", choices=["float32", "float64"])
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--decoder-layers", type=int, default=2)
    p.add_argument("--ffn-mult", type=int, default=2)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--d-max", type=int, default=5)
    p.add_argument("--head-mode", default="dual", choices=["dual", "autograd"])
    p.add_argument("--eval-heldout", action="store_true", help="score held-out GMM suites at each checkpoint")
    p.set_defaults(func=cmd_train)

    from .evaluation import DENSITY_ORACLES, SCORE_ORACLES

    p = sub.add_parser("eval-score", help="score MSE sweep over n and mode counts")
    _common(p, (512, 1024, 2048, 4096))
    p.add_argument("--oracle")
    p.set_defaults(func=cmd_eval_score, oracle_choices=SCORE_ORACLES)

    p = sub.add_parser("eval-density", help="density MSE sweep over n and mode counts")
    _common(p, (512, 1024, 2048, 4096))
    p.add_argument("--oracle")
    p.set_defaults(func=cmd_eval_density, oracle_choices=DENSITY_ORACLES)

    functional_oracles = ("exact", "transformer", "kde", "sd-kde-emp")
    for name, func in (("entropy", cmd_entropy), ("fisher", cmd_fisher)):
        p = sub.add_parser(name, help=f"plug-in {name} estimate with standard error")
        _common(p)
        p.add_argument("--oracle", default="exact")
        p.set_defaults(func=func, oracle_choices=functional_oracles)

    p = sub.add_parser("rfi", help="relative Fisher information between shifted Gaussians")
    _common(p)
    p.add_argument("--oracle", default="exact")
    p.add_argument("--shift", type=float, default=1.0)
    p.set_defaults(func=cmd_rfi, oracle_choices=("exact", "transformer", "kde", "sd-kde-emp"))

    p = sub.add_parser("landau", help="particle simulation of the homogeneous Landau equation")
    _common(p)
    p.add_argument("--oracle", default="exact")
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--dt", type=float, default=0.002)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--n-particles", type=int, default=2048)
    p.add_argument("--init-var", type=float, nargs="+", default=[1.8, 0.6, 0.6])
    p.set_defaults(func=cmd_landau, oracle_choices=("exact", "kde", "transformer"))

    p = sub.add_parser("bench", help="runtime scaling of KDE score vs transformer forward")
    _common(p)
    p.add_argument("--log2-min", type=int, default=9)
    p.add_argument("--log2-max", type=int, default=15)
    p.add_argument("--repeats", type=int, default=1)
    p.set_defaults(func=cmd_bench, d=2)

    p = sub.add_parser("export-attention", help="per-head attention maps and KDE correlation")
    _common(p, (256,))
    p.add_argument("--layer", type=int, default=0)
    p.set_defaults(func=cmd_export_attention)
    return parser


def _apply_config(parser, args, argv):
    """Fill options from ``--config`` that were not given on the command line."""
    if not getattr(args, "config", None):
        return args
    values = read_config(args.config)
    sub = next(a for a in parser._subparsers._group_actions if a.dest == "command").choices[args.command]
    actions = {a.dest: a for a in sub._actions}
    given = {a.dest for a in sub._actions for s in a.option_strings if any(t == s or t.startswith(s + "=") for t in argv)}
    for key, raw in values.items():
        if key not in actions:
            raise ConfigError(f"unknown config key {key!r} for {args.command}")
        if key in given:
            continue
        act = actions[key]
        conv = act.type or str
        try:
            if isinstance(act, argparse._StoreTrueAction):
                val = raw.lower() in ("1", "true", "yes", "on")
            elif act.nargs in ("+", "*"):
                val = [conv(v) for v in raw.replace(",", " ").split()]
            else:
                val = conv(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc
        if act.choices is not None and val not in act.choices:
            raise ConfigError(f"bad value for {key!r}: {raw!r}")
        setattr(args, key, val)
    return args


def main(argv=None) -> int:
    import torch

    from .compute import NonFiniteError
    from .model import WhiteningError

    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(max(1, torch.get_num_threads()))
    try:
        args = _apply_config(parser, args, argv)
        choices = getattr(args, "oracle_choices", None)
        if choices is not None and args.oracle is None:
            raise ConfigError("--oracle is required (flag or config file)")
        if choices is not None and args.oracle not in choices:
            raise ConfigError(f"unknown oracle {args.oracle!r}; choose from {', '.join(choices)}")
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (WhiteningError, NonFiniteError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
