"""Command-line entry point: ``elder <command> --config run.ini``.

Commands: ``gen-data``, ``pretrain``, ``train``, ``solve``, ``gradcheck`` and
``bench-steps``. Every command reads one INI file (sections below, all keys
optional), writes the fully resolved copy to ``<out>/config.ini`` and emits
CSV files with a header row. Exit codes: 0 success, 1 configuration error,
2 numeric failure, 3 I/O failure.

Images used by ``pretrain``/``train``/``solve`` come from ``data.data_dir``
when set (every PGM in the folder, center-cropped to ``image_size``) and are
otherwise generated: training tiles are synthetic indices ``[0, count)``,
validation tiles start at index 1000000 and ``solve`` images at 2000000, all
under ``experiment.seed``.
"""

import argparse
import configparser
import csv
import hashlib
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import data as dt
from . import forward_model as fm
from . import gradcheck as gc
from . import imageio
from . import network as nw
from . import regularizer as rg
from . import solver as sv
from . import trainer as tr
from .errors import ConfigError, FormatError, NumericError, ShapeError

log = logging.getLogger("elder")

VALIDATION_START = 1_000_000
SOLVE_START = 2_000_000
TASKS = ("sisr", "csmri", "inpaint", "denoise")


@dataclass(frozen=True)
class ExperimentSection:
    task: str = "inpaint"
    seed: int = 0
    out: str = "runs/default"


@dataclass(frozen=True)
class DataSection:
    data_dir: str = ""
    count: int = 64
    val_count: int = 16
    image_size: int = 16


@dataclass(frozen=True)
class ModelSection:
    p_missing: float = 0.5
    sampling_ratio: float = 0.1
    factor: int = 2
    kernel: str = "gaussian"
    kernel_size: int = 7
    kernel_sigma: float = 1.6
    mask: str = ""
    noise_sigma: float = 0.0


@dataclass(frozen=True)
class NetworkSection:
    num_scales: int = 2
    residual_blocks_per_scale: int = 2
    base_channels: int = 8
    kernel_size: int = 3


@dataclass(frozen=True)
class RegularizerSection:
    kind: str = "lsr"
    tau: float = 1.0


@dataclass(frozen=True)
class SolverSection:
    gamma0: float = 1.0
    beta: float = 0.5
    rho: float = 0.1
    epsilon: float = 1e-2
    max_iters: int = 100
    line_search: bool = True
    max_backtracks: int = 30
    expand_step: bool = True


@dataclass(frozen=True)
class TrainSection:
    learning_rate: float = 1e-4
    epochs: int = 3
    batch_size: int = 8
    noise_sigma_min: float = 0.0
    noise_sigma_max: float = 10.0 / 255.0
    line_search: bool = False
    pretrain: bool = False
    pretrain_count: int = 512
    pretrain_epochs: int = 15
    pretrain_learning_rate: float = 2e-3
    pretrain_batch_size: int = 16
    pretrain_sigma_max: float = 55.0 / 255.0


@dataclass(frozen=True)
class BenchSection:
    problem: str = "toy"
    epsilon: float = 1e-6
    max_iters: int = 5000
    threshold: float = 0.01


@dataclass(frozen=True)
class PathsSection:
    weights_in: str = ""
    weights_out: str = ""


SECTIONS = {
    "experiment": ExperimentSection, "data": DataSection, "model": ModelSection,
    "network": NetworkSection, "regularizer": RegularizerSection, "solver": SolverSection,
    "train": TrainSection, "bench": BenchSection, "paths": PathsSection,
}


def _parse_value(text, kind, where):
    try:
        if kind is bool:
            low = text.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {kind.__name__}") from None
    return text.strip()


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    regularizer: RegularizerSection = field(default_factory=RegularizerSection)
    solver: SolverSection = field(default_factory=SolverSection)
    train: TrainSection = field(default_factory=TrainSection)
    bench: BenchSection = field(default_factory=BenchSection)
    paths: PathsSection = field(default_factory=PathsSection)

    @classmethod
    def from_ini(cls, text):
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        unknown = [s for s in parser.sections() if s not in SECTIONS]
        sections = {}
        for name, section_cls in SECTIONS.items():
            types = {f.name: f.type for f in fields(section_cls)}
            values = {}
            if parser.has_section(name):
                for key, text_value in parser.items(name):
                    if key not in types:
                        unknown.append(f"{name}.{key}")
                        continue
                    kind = {"int": int, "float": float, "bool": bool, "str": str}.get(types[key], types[key])
                    values[key] = _parse_value(text_value, kind, f"{name}.{key}")
            sections[name] = section_cls(**values)
        if unknown:
            raise ConfigError("unknown config keys: " + ", ".join(unknown))
        return cls(**sections).validate()

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_ini(fh.read())

    def to_ini(self):
        lines = []
        for name in SECTIONS:
            section = getattr(self, name)
            lines.append(f"[{name}]")
            for f in fields(section):
                lines.append(f"{f.name} = {_format_value(getattr(section, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def override(self, section, **changes):
        return replace(self, **{section: replace(getattr(self, section), **changes)}).validate()

    def validate(self):
        bad = []
        e, d, m, t = self.experiment, self.data, self.model, self.train
        if e.task not in TASKS:
            bad.append(f"experiment.task must be one of {', '.join(TASKS)}")
        if d.count < 0 or d.val_count < 0 or d.image_size < 1:
            bad.append("data.count/val_count must be >= 0 and data.image_size >= 1")
        if not 0.0 <= m.p_missing <= 1.0:
            bad.append("model.p_missing must lie in [0, 1]")
        if not 0.0 < m.sampling_ratio <= 1.0:
            bad.append("model.sampling_ratio must lie in (0, 1]")
        if m.factor < 1 or (e.task == "sisr" and d.image_size % m.factor):
            bad.append("model.factor must be >= 1 and divide data.image_size")
        if m.noise_sigma < 0:
            bad.append("model.noise_sigma must be nonnegative")
        if m.kernel_size < 1 or m.kernel_size % 2 == 0:
            bad.append("model.kernel_size must be odd")
        if self.regularizer.tau < 0:
            bad.append("regularizer.tau must be nonnegative (0 disables the regularizer)")
        try:
            rg.RegularizerKind.parse(self.regularizer.kind)
        except ValueError as exc:
            bad.append(str(exc))
        if not 0 <= t.noise_sigma_min <= t.noise_sigma_max:
            bad.append("train.noise_sigma_min/max must satisfy 0 <= min <= max")
        if self.bench.problem not in ("toy", "task"):
            bad.append("bench.problem must be toy or task")
        if bad:
            raise ConfigError("; ".join(bad))
        try:
            self.arch()
            self.solver_config()
            self.train_config()
        except (ConfigError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return self

    # derived objects

    def arch(self):
        n = self.network
        return nw.ArchConfig(n.num_scales, n.residual_blocks_per_scale, n.base_channels, n.kernel_size).validate()

    def solver_config(self, **changes):
        s = self.solver
        cfg = sv.SolverConfig(s.gamma0, s.beta, s.rho, s.epsilon, s.max_iters, s.line_search,
                              s.max_backtracks, s.expand_step)
        return cfg.replace(**changes)

    def train_config(self):
        t = self.train
        return tr.TrainConfig(
            learning_rate=t.learning_rate, epochs=t.epochs, batch_size=t.batch_size,
            noise_sigma_range=(t.noise_sigma_min, t.noise_sigma_max),
            solver=self.solver_config(line_search=t.line_search), seed=self.experiment.seed,
            pretrain=t.pretrain)

    def pretrain_config(self):
        t = self.train
        return tr.TrainConfig(learning_rate=t.pretrain_learning_rate, epochs=t.pretrain_epochs,
                              batch_size=t.pretrain_batch_size, seed=self.experiment.seed)

    def kernel(self):
        m = self.model
        if m.kernel == "gaussian":
            return fm.gaussian_kernel(m.kernel_size, m.kernel_sigma)
        if m.kernel == "uniform":
            return fm.uniform_kernel(m.kernel_size)
        if m.kernel == "delta":
            return fm.delta_kernel(1)
        return imageio.read_kernel(m.kernel)

    def task_spec(self):
        m = self.model
        kernel = self.kernel() if self.experiment.task == "sisr" else None
        return tr.TaskSpec(self.experiment.task, p_missing=(m.p_missing, m.p_missing),
                           sampling_ratio=(m.sampling_ratio, m.sampling_ratio), kernel=kernel,
                           factor=m.factor)


# helpers -----------------------------------------------------------------------------

def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else repr(float(v)) if isinstance(v, (float, np.floating)) else v
                        for v in row])


def _image_shape(cfg):
    return (cfg.data.image_size, cfg.data.image_size)


def training_images(cfg, count):
    if cfg.data.data_dir:
        imgs = dt.load_image_folder(cfg.data.data_dir, _image_shape(cfg))
        if len(imgs) == 0:
            raise ConfigError(f"no usable PGM images in {cfg.data.data_dir}")
        return imgs[:count] if count else imgs
    return dt.synthetic_dataset(count, _image_shape(cfg), cfg.experiment.seed)


def validation_images(cfg):
    return dt.synthetic_dataset(cfg.data.val_count, _image_shape(cfg), cfg.experiment.seed, VALIDATION_START)


def solve_images(cfg):
    if cfg.data.data_dir:
        return training_images(cfg, cfg.data.count)
    return dt.synthetic_dataset(cfg.data.count, _image_shape(cfg), cfg.experiment.seed, SOLVE_START)


def build_model(cfg, shape, index):
    """Measurement model for image ``index``; fixed when a mask file is given."""
    m, task = cfg.model, cfg.experiment.task
    if m.mask and task in ("inpaint", "csmri"):
        mask = imageio.read_mask(m.mask)
        if mask.shape != shape:
            raise ShapeError(f"mask of shape {mask.shape} does not match images {shape}")
        return fm.InpaintMask(mask, m.p_missing) if task == "inpaint" else fm.FourierMask(mask)
    rng = dt.sample_rng(cfg.experiment.seed, 5, index)
    return cfg.task_spec().make_model(shape, rng)


def load_regularizer(cfg, required=True):
    tau = cfg.regularizer.tau
    if tau == 0:
        return None
    path = cfg.paths.weights_in
    if not path:
        if required:
            raise ConfigError("paths.weights_in is required (or set regularizer.tau = 0)")
        return None
    weights = nw.load_weights(path, cfg.arch())
    return rg.Regularizer(cfg.regularizer.kind, weights, tau)


def _checkpointer(out, stage):
    ckpt_dir = os.path.join(out, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    best = {"mse": float("inf")}

    def on_epoch(epoch, weights, record):
        nw.save_weights(weights, os.path.join(ckpt_dir, f"{stage}_epoch{epoch:03d}.eldr"))
        score = record.val_mse[-1] if record.val_mse else record.epoch_losses[-1]
        if score < best["mse"]:
            best["mse"] = score
            nw.save_weights(weights, os.path.join(ckpt_dir, f"{stage}_best.eldr"))

    return on_epoch


def _record_csv(path, record):
    _write_csv(path, ["epoch", "loss", "val_mse", "val_psnr", "skipped"], record.rows())


# commands ----------------------------------------------------------------------------

def cmd_gen_data(cfg, out):
    data_dir = os.path.join(out, "data")
    os.makedirs(data_dir, exist_ok=True)
    rows = []
    for i in range(cfg.data.count):
        name = f"tile_{i:05d}.pgm"
        path = os.path.join(data_dir, name)
        imageio.write_pnm(path, dt.synthetic_image(_image_shape(cfg), cfg.experiment.seed, i))
        with open(path, "rb") as fh:
            rows.append((name, hashlib.sha256(fh.read()).hexdigest()))
    _write_csv(os.path.join(out, "manifest.csv"), ["file", "sha256"], rows)
    log.info("wrote %d tiles to %s", len(rows), data_dir)
    return 0


def _pretrain(cfg, out):
    t = cfg.train
    images = training_images(cfg, t.pretrain_count)
    weights, record = tr.pretrain_denoiser(
        images, cfg.arch(), cfg.pretrain_config(), kind=cfg.regularizer.kind,
        validation=validation_images(cfg), sigma_range=(0.0, t.pretrain_sigma_max),
        on_epoch=_checkpointer(out, "pretrain"))
    _record_csv(os.path.join(out, "pretrain_record.csv"), record)
    return weights


def cmd_pretrain(cfg, out):
    weights = _pretrain(cfg, out)
    nw.save_weights(weights, cfg.paths.weights_out or os.path.join(out, "pretrained.eldr"))
    return 0


def cmd_train(cfg, out):
    if cfg.regularizer.tau <= 0:
        raise ConfigError("training needs regularizer.tau > 0")
    if cfg.paths.weights_in:
        weights = nw.load_weights(cfg.paths.weights_in, cfg.arch())
    elif cfg.train.pretrain:
        weights = _pretrain(cfg, out)
        nw.save_weights(weights, os.path.join(out, "pretrained.eldr"))
    else:
        raise ConfigError("train needs paths.weights_in unless train.pretrain = true")
    weights, record = tr.train_deq(
        training_images(cfg, cfg.data.count), cfg.task_spec(), cfg.train_config(), weights,
        kind=cfg.regularizer.kind, tau=cfg.regularizer.tau, validation=validation_images(cfg),
        on_epoch=_checkpointer(out, "train"))
    _record_csv(os.path.join(out, "train_record.csv"), record)
    nw.save_weights(weights, cfg.paths.weights_out or os.path.join(out, "trained.eldr"))
    return 0


def cmd_solve(cfg, out):
    reg = load_regularizer(cfg)
    config = cfg.solver_config()
    images = solve_images(cfg)
    shape = _image_shape(cfg)
    rows = []
    for i, x_gt in enumerate(images):
        model = build_model(cfg, shape, i)
        problem = fm.simulate(model, x_gt, cfg.model.noise_sigma, seed=int(dt.sample_rng(cfg.experiment.seed, 6, i).integers(2 ** 31)))
        x0 = model.initial_estimate(problem.y)
        result = sv.run_forward(problem, reg, config, x0=x0)
        imageio.write_pnm(os.path.join(out, f"recon_{i:05d}.pgm"), result.x_bar)
        sv.write_trace(result, os.path.join(out, f"trace_{i:05d}.csv"))
        rows.append((i, result.iterations, int(result.converged), result.final_residual,
                     tr.mse(result.x_bar, x_gt), tr.psnr(result.x_bar, x_gt),
                     tr.mse(x0, x_gt), tr.psnr(x0, x_gt)))
        if result.failure:
            log.warning("image %d: %s", i, result.failure)
    _write_csv(os.path.join(out, "metrics.csv"),
               ["index", "iterations", "converged", "final_residual", "mse", "psnr", "init_mse", "init_psnr"], rows)
    return 0


def cmd_gradcheck(cfg, out):
    results = gc.run_suite(cfg.experiment.seed)
    _write_csv(os.path.join(out, "gradcheck.csv"), ["check", "tolerance", "error", "passed"],
               [(r.name, r.tolerance, r.error, int(r.passed)) for r in results])
    print(gc.format_report(results))
    return 0 if all(r.passed for r in results) else 2


def toy_problem(shape=(16, 16), seed=0):
    """Convex quadratic: Gaussian deblurring with an LSR regularizer on a linear filter.

    ``h(x) = 1/2 ||(I - K) x||^2`` where ``K`` is a fixed smoothing stencil, so
    ``grad h`` is linear with Lipschitz constant ``max |1 - K_hat|^2``.
    Returns ``(problem, reg, lipschitz)``.
    """
    x_gt = dt.synthetic_image(shape, seed, 0)
    model = fm.BlurDownsample(fm.gaussian_kernel(5, 1.0), 1, shape)
    problem = fm.simulate(model, x_gt, 0.01, seed=seed)
    net = rg.LinearFilter(np.array([[0.0, 1.0, 0.0], [1.0, 4.0, 1.0], [0.0, 1.0, 0.0]]) / 8.0)
    reg = rg.Regularizer("lsr", net, 1.0)
    lipschitz = float(np.max(np.abs(1.0 - net.spectrum(shape)) ** 2))
    return problem, reg, lipschitz


def bench_strategies(problem, reg, gamma_ref, epsilon, max_iters, threshold):
    """Run backtracking (gamma0 in {0.1, 1, 10} x gamma_ref), fixed gamma_ref and 10% fixed.

    Returns ``(summary_rows, trace_rows)``; iterations-to-threshold count the
    first iterate whose objective is within ``threshold`` (relative to the
    initial gap) of the best final objective over all strategies.
    """
    base = sv.SolverConfig(epsilon=epsilon, max_iters=max_iters)
    runs = [
        ("backtracking", 0.1 * gamma_ref, base.replace(gamma0=0.1 * gamma_ref)),
        ("backtracking", gamma_ref, base.replace(gamma0=gamma_ref)),
        ("backtracking", 10.0 * gamma_ref, base.replace(gamma0=10.0 * gamma_ref)),
        ("fixed", gamma_ref, base.replace(gamma0=gamma_ref, line_search=False)),
        ("fixed_10pct", 0.1 * gamma_ref, base.replace(gamma0=0.1 * gamma_ref, line_search=False)),
    ]
    results = [(name, g0, sv.run_forward(problem, reg, c)) for name, g0, c in runs]
    f0 = results[0][2].f_history[0]
    f_best = min(r.f_history[-1] for _, _, r in results)
    level = f_best + threshold * (f0 - f_best)
    summary, trace = [], []
    for name, g0, r in results:
        hit = next((k for k, f in enumerate(r.f_history) if f <= level), None)
        summary.append((name, g0, r.iterations, int(r.converged), r.f_history[-1], hit))
        for k, f, res, g in r.trace_rows():
            trace.append((name, g0, k, f, res, g))
    return summary, trace


def cmd_bench_steps(cfg, out):
    b = cfg.bench
    if b.problem == "toy":
        problem, reg, lipschitz = toy_problem(seed=cfg.experiment.seed)
        gamma_ref = 1.0 / (reg.tau * lipschitz)
    else:
        reg = load_regularizer(cfg)
        x_gt = solve_images(cfg)[0]
        problem = fm.simulate(build_model(cfg, _image_shape(cfg), 0), x_gt, cfg.model.noise_sigma,
                              seed=cfg.experiment.seed)
        gamma_ref = cfg.solver.gamma0
    summary, trace = bench_strategies(problem, reg, gamma_ref, b.epsilon, b.max_iters, b.threshold)
    _write_csv(os.path.join(out, "bench_summary.csv"),
               ["strategy", "gamma0", "iterations", "converged", "final_f", "iters_to_threshold"], summary)
    _write_csv(os.path.join(out, "bench_steps.csv"), ["strategy", "gamma0", "k", "f", "residual", "gamma"], trace)
    for row in summary:
        log.info("%-12s gamma0=%-8.3g iterations=%-5d f=%.6g to-threshold=%s", *row[:3], row[4], row[5])
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "train": cmd_train,
    "solve": cmd_solve, "gradcheck": cmd_gradcheck, "bench-steps": cmd_bench_steps,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="elder", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI experiment config")
        p.add_argument("--seed", type=int, help="override experiment.seed")
        p.add_argument("--out", help="override experiment.out")
        p.add_argument("--quiet", action="store_true", help="only warnings and errors")
    return parser


def resolve_config(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.override("experiment", seed=args.seed)
    if args.out is not None:
        cfg = cfg.override("experiment", out=args.out)
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        cfg = resolve_config(args)
        out = cfg.experiment.out
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "config.ini"), "w") as fh:
            fh.write(cfg.to_ini())
        return COMMANDS[args.command](cfg, out)
    except (ConfigError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (OSError, FormatError) as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
