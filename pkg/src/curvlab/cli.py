"""Command-line entry point: ``curvlab <subcommand> [options]``.

Each subcommand builds its data and model from the run configuration
(or loads a saved model with ``--model``), writes its CSV report(s) to
the output directory and finishes with a plain-text run manifest.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import analysis, checks, nn, storage
from .config import ConfigError, RunConfig, load_config
from .curvature import collapse_curve, layer_sharpness, sharpness_arrays
from .data import gen_synthetic
from .linalg import SeededRng
from .robustness import certify_dataset, pgd_attack

MODEL_MODULE_ID = 2
SUBCOMMANDS = (
    "gen-data",
    "train",
    "attack",
    "sharpness",
    "certify",
    "sweep-scale",
    "basin",
    "detect",
    "collapse",
    "hessian-check",
)


class Run:
    """Shared state of one subcommand invocation."""

    def __init__(self, name: str, cfg: RunConfig, out: Path, model_path: str | None):
        self.name = name
        self.cfg = cfg
        self.out = out
        self.model_path = model_path
        self.summary: list[str] = []
        self._data = None

    @property
    def data(self):
        if self._data is None:
            self._data = gen_synthetic(self.cfg.dataset_spec())
        return self._data

    def model(self) -> nn.MlpNetwork:
        if self.model_path:
            return storage.load_model(self.model_path)
        return self.train().net

    def train(self) -> nn.TrainResult:
        train, _ = self.data
        init = nn.MlpNetwork.init(self.cfg.dims(), SeededRng(self.cfg.seed).derive(MODEL_MODULE_ID), bias=self.cfg.model.bias)
        return nn.train_sgd(init, train, self.cfg.train_config())

    def attack_set(self) -> nn.SampleBatch:
        _, test = self.data
        n = min(len(test), self.cfg.attack.max_samples)
        return test.subset(np.arange(n))

    def say(self, line: str) -> None:
        self.summary.append(line)
        print(line)

    def finish(self) -> None:
        if self.summary:
            (self.out / f"{self.name}_summary.txt").write_text("\n".join(self.summary) + "\n")
        seeds = {"global": self.cfg.seed, "attack": self.cfg.seed, "train": self.cfg.seed}
        storage.write_manifest(self.out / f"{self.name}_manifest.txt", self.name, self.cfg.to_ini(), seeds)


def cmd_gen_data(run: Run) -> int:
    for name, batch in zip(("train", "test"), run.data):
        cols = [f"x{i}" for i in range(batch.inputs.shape[1])] + ["label"]
        rows = (list(x) + [int(y)] for x, y in zip(batch.inputs, batch.labels))
        storage.write_csv(run.out / f"{name}.csv", cols, rows)
    run.say(f"train={len(run.data[0])} test={len(run.data[1])}")
    return 0


def cmd_train(run: Run) -> int:
    result = run.train()
    storage.save_model(result.net, run.out / "model.json")
    storage.write_csv(run.out / "train_loss.csv", storage.TRAIN_COLUMNS, enumerate(result.losses))
    train, test = run.data
    run.say(f"train_accuracy={nn.accuracy(result.net, train)!r}")
    run.say(f"test_accuracy={nn.accuracy(result.net, test)!r}")
    return 0


def cmd_attack(run: Run) -> int:
    net = run.model()
    trajs = pgd_attack(net, run.attack_set(), run.cfg.attack_config())
    storage.write_csv(run.out / "trajectories.csv", storage.TRAJECTORY_COLUMNS, storage.trajectory_rows(trajs))
    summary = analysis.trajectory_metrics(net, trajs)
    hist = analysis.histogram(summary.loss_increase, run.cfg.analysis.bins)
    storage.write_csv(run.out / "loss_increase_hist.csv", storage.HISTOGRAM_COLUMNS, hist)
    run.say(f"samples={len(trajs)} flipped={summary.flipped}")
    run.say(f"mean_loss_increase={float(np.mean(summary.loss_increase))!r}")
    run.say(f"uncanny_valley_fraction={summary.uncanny_fraction!r} (peak-then-decay proxy, flipped trajectories)")
    return 0


def cmd_sharpness(run: Run) -> int:
    net = run.model()
    _, test = run.data
    arr = sharpness_arrays(net, test.inputs, test.labels)
    classifier = len(net.layers) - 1
    rows = []
    for i in range(len(test)):
        base = (i, arr["loss"][i], arr["confidence"][i], arr["kappa_spectral"][i], arr["kappa_frobenius"][i])
        rows.append(base + (classifier, arr["trace"][i]))
    if run.cfg.analysis.per_layer:
        rng = SeededRng(run.cfg.seed).derive(4)
        rows = []
        for rec in layer_sharpness(net, test, probes=run.cfg.analysis.probes, rng=rng):
            i = rec.sample_id
            base = (i, arr["loss"][i], arr["confidence"][i], arr["kappa_spectral"][i], arr["kappa_frobenius"][i])
            rows.append(base + (rec.layer, rec.trace_estimate))
    storage.write_csv(run.out / "sharpness.csv", storage.SHARPNESS_COLUMNS, rows)
    run.say(f"mean_kappa_spectral={float(np.mean(arr['kappa_spectral']))!r}")
    run.say(f"mean_kappa_frobenius={float(np.mean(arr['kappa_frobenius']))!r}")
    return 0


def cmd_certify(run: Run) -> int:
    net = run.model()
    _, test = run.data
    certs = certify_dataset(net, test, run.cfg.certify.epsilon, gradient_term=run.cfg.certify.gradient_term)
    storage.write_csv(run.out / "certificates.csv", storage.CERTIFICATE_COLUMNS, storage.certificate_rows(certs))
    refused = [c for c in certs if c.refused]
    run.say(f"certified={len(certs) - len(refused)} refused={len(refused)}")
    if len(refused) < len(certs):
        radii = np.array([c.delta_cert for c in certs if not c.refused])
        run.say(f"median_delta_cert={float(np.median(radii))!r}")
    return 0


def cmd_sweep_scale(run: Run) -> int:
    net = run.model()
    res = analysis.scale_sweep(net, run.cfg.sweep.scales, run.cfg.attack_config(), run.attack_set())
    rows = [dataclasses.astuple(e) for e in res.entries]
    storage.write_csv(run.out / "sweep.csv", storage.SWEEP_COLUMNS, rows)
    for e in res.entries:
        run.say(f"s={e.scale!r} robust_accuracy={e.robust_accuracy!r} transfer_rate={e.transfer_rate!r}")
    return 0


def cmd_basin(run: Run) -> int:
    net = run.model()
    trajs = pgd_attack(net, run.attack_set(), run.cfg.attack_config())
    kappa0 = np.array([t.kappa_spectral[0] for t in trajs])
    rep = analysis.basin_report(trajs, kappa0, tau=run.cfg.analysis.tau)
    rows = [(sid, k, t, t) for sid, k, t in zip(rep.sample_ids, rep.kappa_at_clean, rep.take_off)]
    storage.write_csv(run.out / "basin.csv", storage.BASIN_COLUMNS, rows)
    rho = rep.correlation
    run.say(f"defined_take_off={rep.defined} of {len(trajs)}")
    run.say(f"spearman={rho.rho!r} degenerate_ties={rho.degenerate_ties}")
    return 0


def cmd_detect(run: Run) -> int:
    net = run.model()
    batch = run.attack_set()
    trajs = pgd_attack(net, batch, dataclasses.replace(run.cfg.attack_config(), record_trajectory=False))
    key = "kappa_" + run.cfg.analysis.detector_measure
    clean = sharpness_arrays(net, batch.inputs, batch.labels)[key]
    adv = np.array([getattr(t, key)[-1] for t in trajs])
    values = np.concatenate([clean, adv])
    labels = np.r_[np.zeros(clean.size, dtype=np.int64), np.ones(adv.size, dtype=np.int64)]
    res = analysis.stump_detector_cv(values, labels, run.cfg.analysis.folds, run.cfg.seed)
    rows = [(f.fold, f.threshold, f.direction, f.train_accuracy, f.test_accuracy) for f in res.folds]
    storage.write_csv(run.out / "detector.csv", storage.DETECTOR_COLUMNS, rows)
    run.say(f"measure={key} folds={len(res.folds)} mean_accuracy={res.mean_accuracy!r}")
    return 0


def cmd_collapse(run: Run) -> int:
    net = run.model()
    _, test = run.data
    curve = collapse_curve(net, test, run.cfg.analysis.alphas)
    viol = np.sum(~curve.envelope_ok, axis=1)
    rows = [
        (a, ks, kf, float(np.mean(tr)) if tr.size else 0.0, float(np.mean(c)) if c.size else 0.0, int(v))
        for a, ks, kf, tr, c, v in zip(
            curve.alphas, curve.kappa_spectral, curve.kappa_frobenius, curve.trace_logit, curve.confidence, viol
        )
    ]
    storage.write_csv(run.out / "collapse.csv", storage.COLLAPSE_COLUMNS, rows)
    run.say(f"samples={curve.sample_ids.size} excluded_misclassified={curve.excluded}")
    run.say(f"kappa_ratio_last_first={float(curve.kappa_ratio[-1])!r}")
    return 0


def cmd_hessian_check(run: Run) -> int:
    results = checks.run_all(seed=run.cfg.seed)
    rows = [(r.name, r.instances, r.max_rel_error, r.tolerance, r.passed) for r in results]
    storage.write_csv(run.out / "hessian_check.csv", storage.HESSIAN_CHECK_COLUMNS, rows)
    run.say(f"{'check':<24} {'n':>4} {'max_rel_error':>14} {'tolerance':>10}  result")
    for r in results:
        run.say(f"{r.name:<24} {r.instances:>4} {r.max_rel_error:>14.3e} {r.tolerance:>10.1e}  {'PASS' if r.passed else 'FAIL'}")
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "attack": cmd_attack,
    "sharpness": cmd_sharpness,
    "certify": cmd_certify,
    "sweep-scale": cmd_sweep_scale,
    "basin": cmd_basin,
    "detect": cmd_detect,
    "collapse": cmd_collapse,
    "hessian-check": cmd_hessian_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="curvlab", description="Relative sharpness and robustness experiments.")
    parser.add_argument("command", choices=SUBCOMMANDS)
    parser.add_argument("--config", help="INI run configuration")
    parser.add_argument("--out", help="output directory (overrides [run] out)")
    parser.add_argument("--seed", type=int, help="global seed (overrides [run] seed)")
    parser.add_argument("--model", help="load this model JSON instead of training")
    parser.add_argument("--steps", type=int, help="attack steps")
    parser.add_argument("--eps", type=float, help="attack radius; certificate loss tolerance for certify")
    parser.add_argument("--alpha", type=float, help="attack step size")
    parser.add_argument("--norm", choices=("l2", "linf"), help="attack norm")
    parser.add_argument("--scales", help="comma-separated scaling factors")
    parser.add_argument("--tau", type=float, help="relative take-off threshold")
    parser.add_argument("--folds", type=int, help="detector cross-validation folds")
    return parser


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    if args.out is not None:
        cfg.run.out = args.out
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 1 << 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        cfg.run.seed = args.seed
    if args.steps is not None:
        cfg.attack.steps = args.steps
    if args.eps is not None:
        if args.command == "certify":
            cfg.certify.epsilon = args.eps
        else:
            cfg.attack.epsilon = args.eps
    if args.alpha is not None:
        cfg.attack.step_size = args.alpha
    if args.norm is not None:
        cfg.attack.norm = args.norm
    if args.scales is not None:
        try:
            cfg.sweep.scales = tuple(float(s) for s in args.scales.split(",") if s.strip())
        except ValueError as exc:
            raise ConfigError(f"--scales: {exc}") from exc
    if args.tau is not None:
        cfg.analysis.tau = args.tau
    if args.folds is not None:
        cfg.analysis.folds = args.folds
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = apply_overrides(cfg, args)
        cfg.attack_config()  # validate before any work
    except (ConfigError, ValueError, OSError) as exc:
        print(f"curvlab: configuration error: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg.run.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        print(f"curvlab: output directory {out} is not writable: {exc}", file=sys.stderr)
        return 2
    run = Run(args.command, cfg, out, args.model)
    try:
        status = COMMANDS[args.command](run)
    except (ValueError, OSError, storage.ModelFormatError, FloatingPointError, RuntimeError) as exc:
        print(f"curvlab {args.command}: {exc}", file=sys.stderr)
        return 1
    run.finish()
    return status


if __name__ == "__main__":
    sys.exit(main())
