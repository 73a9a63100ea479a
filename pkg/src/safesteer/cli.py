"""Command-line orchestration: dataset collection, training for the three
inference methods, safety evaluation across weather grids, monitored drives,
and sample-size planning.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, fields, replace

import numpy as np

from . import bayes, io, nn, sim, statcheck, uncertainty
from .controllers import BnnController

ALL_WEATHERS = ("clear", "cloudy", "wet", "rain")


@dataclass
class RunConfig:
    scenario: str = "straight_obstacle"
    num_classes: int = 20
    eps: float = 0.1
    delta1: float = 0.7
    delta2: float = 0.6
    mi_threshold: float = uncertainty.DEFAULT_MI_THRESHOLD
    n_samples: int = 32
    slow_factor: float = 0.5
    theta: float = 0.05
    gamma: float = 0.05
    weathers: tuple[str, ...] = ALL_WEATHERS
    seed: int = 0
    episodes: int = 20
    frame_stride: int = 1
    epochs: int = 25
    batch_size: int = 16
    lr: float = 1e-4
    vi_iterations: int = 2000
    vi_lr: float = 0.01
    hmc_step_size: float = 0.01
    hmc_leapfrog: int = 10
    hmc_burn_in: int = 500
    hmc_samples: int = 1000
    hmc_thin: int = 2
    jobs: int = 1
    log_episodes: int = 3

    def validate(self) -> None:
        if self.delta2 >= self.delta1:
            raise ValueError("delta2 must be below delta1")
        statcheck.PrecisionSpec(self.theta, self.gamma)
        for w in self.weathers:
            if w not in sim.WEATHER_PRESETS:
                raise ValueError(f"unknown weather {w!r}")


def load_config(path: str | None, overrides: dict) -> RunConfig:
    """Config file supplies defaults; explicitly passed flags win."""
    cfg = RunConfig()
    if path is not None:
        with open(path) as fh:
            data = json.load(fh)
        known = {f.name for f in fields(RunConfig)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "weathers" in data:
            data["weathers"] = tuple(data["weathers"])
        cfg = replace(cfg, **data)
    live = {k: v for k, v in overrides.items() if v is not None}
    if "weathers" in live:
        live["weathers"] = _parse_weathers(live["weathers"])
    cfg = replace(cfg, **live)
    cfg.validate()
    return cfg


def _parse_weathers(text: str) -> tuple[str, ...]:
    if text == "all":
        return ALL_WEATHERS
    return tuple(w.strip() for w in text.split(",") if w.strip())


def training_accuracy(mcd: bayes.McdPosterior, ds) -> float:
    """Mask-free argmax accuracy over the training images."""
    from .datasets import image_to_input

    x = np.stack([image_to_input(img) for img in ds.images])
    logits = nn.forward_batch(mcd.spec, mcd.weights, x)
    return float(np.mean(np.argmax(logits, axis=1) == ds.labels))


def _controller(model: io.TrainedModel, cfg: RunConfig,
                with_confidence: bool) -> BnnController:
    bins = uncertainty.Binning(cfg.num_classes)
    thresholds = uncertainty.WarningThresholds(cfg.delta1, cfg.delta2, cfg.mi_threshold)
    return BnnController(model.mcd, model.posterior, bins, cfg.eps,
                         cfg.n_samples, thresholds, with_confidence)


def cmd_collect(args, cfg: RunConfig) -> int:
    scenario = sim.scenario_by_name(cfg.scenario)
    ds = sim.collect_dataset(scenario, cfg.episodes, cfg.seed, cfg.frame_stride)
    io.write_dataset(ds, args.out)
    print(f"wrote {len(ds)} (image, label) pairs to {args.out}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    if args.method in ("vi", "hmc") and args.mcd_model is None:
        print(f"train --method {args.method} requires --mcd-model", file=sys.stderr)
        return 2
    ds = io.read_dataset(args.dataset)
    spec = nn.default_network_spec(cfg.num_classes)
    dataset_hash = io.dataset_hash(args.dataset)
    rng = np.random.default_rng(cfg.seed)
    meta: dict = {"seed": cfg.seed, "dataset_hash": dataset_hash}

    if args.method == "mcd":
        meta["epochs"] = cfg.epochs
        post = bayes.train_mcd(ds, spec, cfg.epochs, cfg.batch_size, cfg.lr, rng)
        meta["train_accuracy"] = training_accuracy(post, ds)
        model = io.TrainedModel("mcd", post, post, meta)
    else:
        base = io.load_model(args.mcd_model)
        head = nn.head_spec(base.mcd.spec)
        feats = bayes.extract_features_batch(base.mcd, ds.images)
        fds = bayes.FeatureDataset(feats, np.asarray(ds.labels, dtype=np.int64))
        prior = bayes.Prior(sigma=args.prior_sigma)
        init = bayes.head_weights(base.mcd)
        if args.method == "vi":
            meta["iterations"] = cfg.vi_iterations
            vcfg = bayes.ViConfig(cfg.vi_iterations, 1, cfg.vi_lr, cfg.seed)
            post = bayes.train_vi(fds, head, prior, vcfg, init_mu=init)
        else:
            if args.vi_model is not None:
                init = io.load_model(args.vi_model).posterior.mu
            hcfg = bayes.HmcConfig(cfg.hmc_step_size, cfg.hmc_leapfrog,
                                   cfg.hmc_burn_in, cfg.hmc_samples, cfg.hmc_thin)
            meta["chain"] = {"burn_in": hcfg.burn_in, "samples": hcfg.samples,
                             "thin": hcfg.thin, "step_size": hcfg.step_size}
            post = bayes.train_hmc(fds, head, prior, hcfg, rng, init_w=init)
        model = io.TrainedModel(args.method, base.mcd, post, meta)
    io.save_model(model, args.out)
    print(f"wrote {args.method} model to {args.out}")
    return 0


def cmd_eval_safety(args, cfg: RunConfig) -> int:
    model = io.load_model(args.model)
    spec = statcheck.PrecisionSpec(cfg.theta, cfg.gamma)
    n = statcheck.chernoff_sample_size(spec)
    monitor_options = [False, True] if args.with_monitor else [False]
    cells = []
    logged_paths = []
    for weather in cfg.weathers:
        scenario = sim.scenario_by_name(cfg.scenario, weather=weather)
        for monitored in monitor_options:
            controller = _controller(model, cfg, with_confidence=monitored)
            monitor = sim.MonitorPolicy(cfg.slow_factor) if monitored else None
            est = statcheck.estimate_probabilistic_safety(
                scenario, controller, monitor, spec, cfg.seed, jobs=cfg.jobs)
            warning_steps = {"W0": 0, "W1": 0, "W2": 0}
            for i in range(min(cfg.log_episodes, n)):
                path = sim.run_episode(scenario, controller, monitor, seed=[cfg.seed, i])
                logged_paths.append(path)
                for rec in path.records:
                    if rec.warning in warning_steps:
                        warning_steps[rec.warning] += 1
            cells.append({
                "method": model.method,
                "scenario": cfg.scenario,
                "weather": weather,
                "monitored": monitored,
                "estimate": io.estimate_to_dict(est),
                "warning_steps_logged": warning_steps,
            })
            print(f"{model.method} {cfg.scenario} {weather} "
                  f"monitor={'on' if monitored else 'off'}: "
                  f"eta_hat={est.eta_hat:.4f} autonomy={est.autonomy_rate:.4f} (n={n})")
    config_echo = {f.name: getattr(cfg, f.name) for f in fields(RunConfig)}
    config_echo["weathers"] = list(cfg.weathers)
    io.write_summary_report(args.report, config_echo, spec, n, cells)
    scenario = sim.scenario_by_name(cfg.scenario)
    with open(args.log, "w", newline="") as fh:
        io.write_trajectory(logged_paths, scenario.dt, fh)
    print(f"wrote {args.report} and {args.log}")
    return 0


def cmd_drive(args, cfg: RunConfig) -> int:
    model = io.load_model(args.model)
    scenario = sim.scenario_by_name(cfg.scenario, weather=args.weather)
    controller = _controller(model, cfg, with_confidence=args.monitor)
    monitor = sim.MonitorPolicy(cfg.slow_factor) if args.monitor else None
    path = sim.run_episode(scenario, controller, monitor, seed=cfg.seed)
    with open(args.out, "w", newline="") as fh:
        io.write_trajectory([path], scenario.dt, fh)
    print(f"outcome={path.outcome} steps={len(path.records)} -> {args.out}")
    return 0


def cmd_plan_samples(args, cfg: RunConfig) -> int:
    spec = statcheck.PrecisionSpec(cfg.theta, cfg.gamma)
    print(statcheck.chernoff_sample_size(spec))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="safesteer",
        description="Train Bayesian steering controllers and certify their "
                    "safety with Chernoff-bounded estimates.")
    parser.add_argument("--config", help="JSON config file; flags override its values")
    sub = parser.add_subparsers(dest="command", required=True)

    def shared(p):
        p.add_argument("--scenario", dest="scenario",
                       choices=("straight_obstacle", "roundabout_first_exit"))
        p.add_argument("--seed", type=int, dest="seed")

    p = sub.add_parser("collect", help="record autopilot (image, label) pairs")
    shared(p)
    p.add_argument("--episodes", type=int, dest="episodes")
    p.add_argument("--frame-stride", type=int, dest="frame_stride")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_collect)

    p = sub.add_parser("train", help="train a posterior on a dataset")
    shared(p)
    p.add_argument("--method", choices=("mcd", "vi", "hmc"), required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mcd-model", help="trained MCD model (extractor) for vi/hmc")
    p.add_argument("--vi-model", help="optional VI model whose mean seeds the HMC chain")
    p.add_argument("--prior-sigma", type=float, default=1.0)
    p.add_argument("--epochs", type=int, dest="epochs")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float, dest="lr")
    p.add_argument("--vi-iterations", type=int, dest="vi_iterations")
    p.add_argument("--vi-lr", type=float, dest="vi_lr")
    p.add_argument("--hmc-step-size", type=float, dest="hmc_step_size")
    p.add_argument("--hmc-burn-in", type=int, dest="hmc_burn_in")
    p.add_argument("--hmc-samples", type=int, dest="hmc_samples")
    p.add_argument("--hmc-thin", type=int, dest="hmc_thin")
    p.add_argument("--classes", type=int, dest="num_classes")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval-safety", help="Chernoff-certified safety per weather")
    shared(p)
    p.add_argument("--model", required=True)
    p.add_argument("--theta", type=float, dest="theta")
    p.add_argument("--gamma", type=float, dest="gamma")
    p.add_argument("--weathers", dest="weathers", help="comma list or 'all'")
    p.add_argument("--with-monitor", action="store_true")
    p.add_argument("--jobs", type=int, dest="jobs")
    p.add_argument("--log-episodes", type=int, dest="log_episodes")
    p.add_argument("--report", required=True)
    p.add_argument("--log", required=True)
    p.set_defaults(fn=cmd_eval_safety)

    p = sub.add_parser("drive", help="run one episode and log the trajectory")
    shared(p)
    p.add_argument("--model", required=True)
    p.add_argument("--weather", default="clear", choices=ALL_WEATHERS)
    p.add_argument("--monitor", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_drive)

    p = sub.add_parser("plan-samples", help="print the Chernoff sample size")
    p.add_argument("--theta", type=float, required=True, dest="theta")
    p.add_argument("--gamma", type=float, required=True, dest="gamma")
    p.set_defaults(fn=cmd_plan_samples)
    return parser


CONFIG_FIELDS = {f.name for f in fields(RunConfig)}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k in CONFIG_FIELDS}
    try:
        cfg = load_config(args.config, overrides)
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    try:
        return args.fn(args, cfg)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RuntimeError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
