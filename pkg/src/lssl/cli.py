"""``lssl`` command-line entry point.

Subcommands: ``train``, ``eval``, ``kernel``, ``gradcheck``, ``memorize``,
``bench``. Exit codes: 0 success, 1 failed check, 2 configuration error,
3 data or I/O error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time

import numpy as np

from . import grad as grad_mod
from .bench import BENCH_HEADER, run_bench
from .config import ConfigError, RunConfig, load_config
from .layer import (CheckpointError, init_layer, init_model, load_checkpoint, save_checkpoint,
                    ssm_rec)
from .tasks import (DataFormatError, bandlimited_signal, load_idx, make_delay_task,
                    read_signal_csv, reconstruct_history)
from .training import DivergenceError, evaluate, train_model

__all__ = ["main", "build_parser", "cmd_train", "cmd_eval", "cmd_kernel", "cmd_gradcheck",
           "cmd_memorize", "cmd_bench", "METRICS_HEADER"]

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_NAN = 0, 1, 2, 3, 4
METRICS_HEADER = "epoch,split,loss,metric,wall_seconds"


def _fmt(x):
    return format(float(x), ".17g")


def _out_path(cfg: RunConfig, name):
    os.makedirs(cfg.out, exist_ok=True)
    return os.path.join(cfg.out, name)


# -- data ------------------------------------------------------------------------


def load_data(cfg: RunConfig):
    """``(train, val, test)`` datasets for the configured task; ``test`` may be None."""
    if cfg.task == "delay":
        ss = np.random.SeedSequence(cfg.seed).spawn(2)
        train = make_delay_task(cfg.seq_len, cfg.delay, cfg.n_train, ss[0])
        val = make_delay_task(cfg.seq_len, cfg.delay, cfg.n_val, ss[1], split="val")
        return train, val, None
    if not (cfg.train_images and cfg.train_labels):
        raise DataFormatError("idx task needs train_images and train_labels")
    full = load_idx(cfg.train_images, cfg.train_labels, cfg.limit)
    order = np.random.default_rng(cfg.seed).permutation(len(full))
    n_val = int(round(cfg.val_fraction * len(full)))
    val = full.subset(order[:n_val], "val")
    train = full.subset(order[n_val:], "train")
    test = None
    if cfg.test_images and cfg.test_labels:
        test = load_idx(cfg.test_images, cfg.test_labels, cfg.limit, split="test")
    return train, val, test


def _output_dim(cfg: RunConfig, train):
    return train.n_classes if train.task_kind == "classify" else 1


def _build_model(cfg: RunConfig, train):
    input_dim = 1 if train.X.ndim == 2 else train.X.shape[2]
    return init_model(input_dim, _output_dim(cfg, train), H=cfg.H, N=cfg.N, M=cfg.M,
                      depth=cfg.depth, dt_min=cfg.dt_min, dt_max=cfg.dt_max, seed=cfg.seed,
                      family=cfg.family, mode=cfg.mode, norm=cfg.norm,
                      pooling=cfg.effective_pooling, structured=cfg.structured)


# -- commands -----------------------------------------------------------------------


def cmd_train(cfg: RunConfig, timestamps=True, log=print):
    """Train, write ``metrics.csv`` and the best-validation checkpoint ``model.lssl``."""
    train, val, _ = load_data(cfg)
    model = _build_model(cfg, train)
    metrics = _out_path(cfg, "metrics.csv")
    ckpt = _out_path(cfg, "model.lssl")
    with open(_out_path(cfg, "config.txt"), "w") as fh:
        fh.write(cfg.to_text())
    with open(metrics, "w", newline="") as fh:
        fh.write(METRICS_HEADER + "\n")

        def on_epoch(epoch, split, loss, metric, wall):
            wall = wall if timestamps else 0.0
            fh.write(f"{epoch},{split},{_fmt(loss)},{_fmt(metric)},{wall:.3f}\n")
            fh.flush()
            log(f"epoch {epoch} {split} loss={loss:.6g} metric={metric:.6g}")

        try:
            train_model(model, train, val, epochs=cfg.epochs, lr=cfg.lr,
                        batch_size=cfg.batch_size, seed=cfg.seed,
                        stop_below=cfg.stop_below, on_epoch=on_epoch)
        except DivergenceError:
            save_checkpoint(model, _out_path(cfg, "diverged.lssl"))
            raise
    save_checkpoint(model, ckpt)
    return EXIT_OK


def cmd_eval(cfg: RunConfig, log=print):
    """Evaluate a checkpoint on every available split; writes ``eval.csv``."""
    path = cfg.checkpoint or os.path.join(cfg.out, "model.lssl")
    try:
        model = load_checkpoint(path, pooling=cfg.effective_pooling)
    except OSError as exc:
        raise DataFormatError(f"cannot read checkpoint {path}: {exc}") from exc
    train, val, test = load_data(cfg)
    with open(_out_path(cfg, "eval.csv"), "w", newline="") as fh:
        fh.write("split,loss,metric\n")
        for ds in (train, val, test):
            if ds is None or not len(ds):
                continue
            loss, metric = evaluate(model, ds)
            fh.write(f"{ds.split},{_fmt(loss)},{_fmt(metric)}\n")
            log(f"{ds.split} loss={loss:.6g} metric={metric:.6g}")
    return EXIT_OK


def cmd_kernel(cfg: RunConfig, log=print):
    """Per-feature kernels of one freshly initialized layer; writes ``kernel.csv``.

    With ``kernel_c = e0`` every channel reads the first state coordinate,
    so each row is the first row of that feature's Krylov matrix.
    """
    layer = init_layer(cfg.H, cfg.N, cfg.M, cfg.dt_min, cfg.dt_max, cfg.seed, cfg.family,
                       structured=cfg.structured)
    if cfg.kernel_c == "e0":
        layer.C[:] = 0.0
        layer.C[:, :, 0] = 1.0
    K = layer.kernel(cfg.kernel_length)
    path = _out_path(cfg, "kernel.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "channel", "dt"] + [f"k{i}" for i in range(cfg.kernel_length)])
        for h in range(layer.H):
            for m in range(layer.M):
                w.writerow([h, m, _fmt(layer.dt[h])] + [_fmt(v) for v in K[h, m]])
    log(f"wrote {path}")
    return EXIT_OK


def _check_tensor(f, theta, analytic, coords, rng, tol):
    flat = list(np.ndindex(theta.shape))
    if len(flat) > coords:
        flat = [flat[i] for i in sorted(rng.choice(len(flat), coords, replace=False))]
    worst = 0.0
    for idx in flat:
        fd = grad_mod.finite_difference(f, theta, idx)
        worst = max(worst, float(grad_mod.relative_error(analytic[idx], fd)))
    return worst, len(flat)


def gradcheck_rows(cfg: RunConfig, seed: int):
    """``(check, max_rel_err, n_coords)`` rows for one seed."""
    rng = np.random.default_rng(seed)
    H, N, L, depth = min(cfg.H, 8), min(cfg.N, 8), 32, 2
    rows = []
    model = init_model(1, 3, H=H, N=N, M=cfg.M, depth=depth, dt_min=cfg.dt_min,
                       dt_max=cfg.dt_max, seed=seed, family=cfg.family, mode=cfg.mode,
                       norm=cfg.norm, pooling="mean", structured=cfg.structured)
    X = rng.normal(size=(4, L))
    y = rng.integers(0, 3, size=4)
    _, grads = grad_mod.model_backward(model, X, y, "cross_entropy")

    def f():
        for layer in model.layers:
            layer.invalidate()
        return grad_mod.loss_and_grad(grad_mod.model_forward(model, X, "conv"), y, "cross_entropy")[0]

    for name, theta in model.parameters(trainable_only=True).items():
        err, n = _check_tensor(f, theta, grads[name], cfg.gradcheck_coords, rng, cfg.gradcheck_tol)
        rows.append((f"model.{name}", err, n))

    # timestep and state-matrix adjoints through the recurrence, in every mode
    layer = init_layer(2, min(N, 16), 2, cfg.dt_min, cfg.dt_max, rng, cfg.family,
                       mode="full", structured=False)
    u = rng.normal(size=(2, 16, 2))
    dy = rng.normal(size=(2, 16, 2, 2))
    d_dt, dA = grad_mod.recurrent_param_grads(layer, u, dy)

    def g():
        layer.invalidate()
        return float(np.sum(ssm_rec(layer, u) * dy))

    dt_analytic = d_dt * layer.dt  # chain through log_dt
    err, n = _check_tensor(g, layer.log_dt, dt_analytic, cfg.gradcheck_coords, rng, cfg.gradcheck_tol)
    rows.append(("recurrent.dt", err, n))
    err, n = _check_tensor(g, layer.A, dA, cfg.gradcheck_coords, rng, cfg.gradcheck_tol)
    rows.append(("recurrent.A", err, n))
    return rows


def cmd_gradcheck(cfg: RunConfig, log=print):
    """Analytic vs central-difference gradients; exit 0 iff every check passes."""
    ok = True
    path = _out_path(cfg, "gradcheck.csv")
    with open(path, "w", newline="") as fh:
        fh.write("seed,check,max_rel_err,n_coords,pass\n")
        for k in range(cfg.gradcheck_seeds):
            seed = cfg.seed + k
            for name, err, n in gradcheck_rows(cfg, seed):
                passed = err < cfg.gradcheck_tol
                ok &= passed
                fh.write(f"{seed},{name},{err:.3e},{n},{int(passed)}\n")
                if not passed:
                    log(f"FAIL seed={seed} {name}: max rel err {err:.3e}")
    log(f"gradcheck {'passed' if ok else 'FAILED'}; details in {path}")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_memorize(cfg: RunConfig, log=print):
    """Reconstruction error per order for a signal file (or the built-in test signal)."""
    if cfg.signal:
        u, sid = read_signal_csv(cfg.signal), os.path.basename(cfg.signal)
    else:
        u, sid = bandlimited_signal(seed=cfg.seed), f"bandlimited-seed{cfg.seed}"
    dt = cfg.signal_dt or 1.0 / u.size
    path = _out_path(cfg, "memorize.csv")
    with open(path, "w", newline="") as fh:
        fh.write("signal_id,N,l2_error\n")
        for N in cfg.orders:
            report = reconstruct_history(u, dt, N, sid)[2]
            fh.write(f"{report.signal_id},{report.N},{_fmt(report.l2_error)}\n")
            log(f"N={N} l2_error={report.l2_error:.3e}")
    return EXIT_OK


def cmd_bench(cfg: RunConfig, timestamps=True, log=print):
    """Median-of-``bench_repeats`` timings; writes ``bench.csv``."""
    rows = run_bench(cfg.bench_n, cfg.bench_l, cfg.bench_repeats, seed=cfg.seed)
    path = _out_path(cfg, "bench.csv")
    with open(path, "w", newline="") as fh:
        fh.write(BENCH_HEADER + "\n")
        for method, N, L, sec in rows:
            fh.write(f"{method},{N},{L},{(sec if timestamps else 0.0):.6g}\n")
            log(f"{method:16s} N={N:4d} L={L:5d} {sec:.3e}s")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------

COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "kernel": cmd_kernel,
    "gradcheck": cmd_gradcheck,
    "memorize": cmd_memorize,
    "bench": cmd_bench,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="lssl", description="Linear state-space layer toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or "").splitlines()[0])
        p.add_argument("--config", metavar="PATH", help="flat key = value config file")
        p.add_argument("--seed", type=int, metavar="U64", help="override the config seed")
        p.add_argument("--mode", choices=("fixed", "full"), help="override the training mode")
        p.add_argument("--out", metavar="DIR", help="output directory")
        p.add_argument("--no-timestamps", action="store_true",
                       help="write 0 for wall-clock columns (byte-reproducible output)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key (repeatable)")
        if name == "memorize":
            p.add_argument("signal", nargs="?", help="CSV file with the signal samples")
            p.add_argument("--orders", help="comma-separated state orders")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    overrides = {}
    for item in args.set:
        if "=" not in item:
            print(f"error: --set expects KEY=VALUE, got {item!r}", file=sys.stderr)
            return EXIT_CONFIG
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for key in ("seed", "mode", "out"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    if args.command == "memorize":
        if args.signal:
            overrides["signal"] = args.signal
        if args.orders:
            overrides["orders"] = args.orders
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    fn = COMMANDS[args.command]
    kwargs = {"timestamps": not args.no_timestamps} if args.command in ("train", "bench") else {}
    start = time.perf_counter()
    try:
        code = fn(cfg, **kwargs)
    except (DataFormatError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_NAN
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not args.no_timestamps:
        print(f"{args.command} finished in {time.perf_counter() - start:.2f}s", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
