"""Command-line entry point.

Subcommands cover the whole artifact lifecycle: ``gen-synthetic`` writes a
planted-cue dataset, ``train`` fits a model, ``eval`` scores it, ``gradcheck``
verifies the autodiff engine end to end, ``export-heatmap`` renders a gating
map, and ``inspect`` dumps the header of a stored feature volume.

Settings resolve in precedence order: command-line flags, then the JSON file
named by ``--config``, then built-in defaults. Errors print one JSON line on
stderr; exit codes are 0 (success), 2 (usage), 3 (bad config), 1 (runtime).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, MoeReidError
from .evaluator import PROTOCOLS, evaluate, export_heatmap
from .feature_store import (
    SyntheticSpec,
    load_record,
    read_manifest,
    read_volume,
    write_synthetic,
)
from .losses import PairSample, total_loss
from .moe_core import ModelConfig, ModelParams, forward, load_checkpoint
from .numerics import Tensor, grad_check
from .trainer import fit

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3

GRADCHECK_TOL = 1e-4


@dataclass
class RunConfig:
    """Run settings: model hyperparameters plus paths and run-level flags.

    Defaults follow the reference operating point (T=16, n1=8, n2=3, M=4,
    alpha=0.5, beta=1, margin=4); paths stay unset until given.
    """

    d: int = 16
    K: int = 17
    T: int = 16
    n1: int = 8
    n2: int = 3
    M: int = 4
    heads: int = 4
    num_identities: int = 8
    lr: float = 1e-3
    alpha: float = 0.5
    beta: float = 1.0
    margin: float = 4.0
    band_q: float = 20.0
    dual_shared: bool = False
    seed: int = 0
    steps: int = 100
    batch_identities: int = 4
    mode_ratio: int = 1
    protocol: str = "general"
    manifest: str | None = None
    checkpoint: str | None = None
    out: str | None = None

    @staticmethod
    def load(path: str | Path) -> "RunConfig":
        try:
            row = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(row, dict):
            raise ConfigError("config root must be a JSON object")
        return RunConfig.from_dict(row)

    @staticmethod
    def from_dict(row: dict) -> "RunConfig":
        known = {f.name for f in fields(RunConfig)}
        unknown = set(row) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        config = RunConfig(**row)
        config.validate()
        return config

    def validate(self) -> None:
        self.to_model_config()
        if self.protocol.lower() not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch_identities < 1:
            raise ConfigError("batch_identities must be >= 1")
        if self.mode_ratio < 0:
            raise ConfigError("mode_ratio must be >= 0")

    def to_model_config(self) -> ModelConfig:
        return ModelConfig.from_dict({
            "d": self.d, "K": self.K, "T": self.T, "n1": self.n1,
            "n2": self.n2, "M": self.M, "heads": self.heads,
            "num_identities": self.num_identities, "lr": self.lr,
            "alpha": self.alpha, "beta": self.beta, "margin": self.margin,
            "band_q": self.band_q, "seed": self.seed,
            "dual_shared": self.dual_shared,
        })


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Apply flag overrides on top of the config file on top of defaults."""
    config = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {
        "seed": args.seed,
        "steps": getattr(args, "steps", None),
        "band_q": getattr(args, "dual_band_q", None),
        "protocol": getattr(args, "protocol", None),
        "manifest": getattr(args, "manifest", None),
        "checkpoint": getattr(args, "checkpoint", None),
        "out": getattr(args, "out", None),
    }
    for name, value in overrides.items():
        if value is not None:
            setattr(config, name, value)
    config.validate()
    return config


def _fail(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


def _require(config: RunConfig, field_name: str) -> str:
    value = getattr(config, field_name)
    if value is None:
        raise ConfigError(f"{field_name} path is required "
                          f"(flag --{field_name} or config key)")
    return value


def _load_manifest(config: RunConfig):
    path = Path(_require(config, "manifest"))
    return read_manifest(path), path.parent


def _load_params(config: RunConfig, model_config: ModelConfig) -> ModelParams:
    # Without a checkpoint, evaluation runs on freshly seeded weights so the
    # command stays usable before any training has happened.
    if config.checkpoint is None:
        return ModelParams.build(model_config)
    params, _ = load_checkpoint(config.checkpoint)
    params.validate(model_config)
    return params


def _cmd_gen_synthetic(args: argparse.Namespace) -> int:
    spec = SyntheticSpec(
        num_subjects=args.subjects, tracklets_per_subject=args.tracklets,
        T=args.frames, K=args.tokens, C=args.channels, cue=args.cue,
        noise_sigma=args.noise_sigma, seed=args.seed if args.seed is not None
        else 0, sc_split=args.sc_split)
    manifest_path = write_synthetic(spec, args.out)
    print(json.dumps({"manifest": str(manifest_path),
                      "tracklets": spec.num_subjects
                      * spec.tracklets_per_subject}))
    return EXIT_OK


def _cmd_train(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    manifest, base_dir = _load_manifest(config)
    out_dir = _require(config, "out")
    state = fit(config.to_model_config(), manifest, steps=config.steps,
                batch_identities=config.batch_identities, out_dir=out_dir,
                base_dir=base_dir, resume=config.checkpoint,
                mode_ratio=config.mode_ratio)
    last = state.history[-1][2] if state.history else float("nan")
    print(json.dumps({"steps": state.step, "final_loss": last,
                      "out": str(out_dir)}))
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    model_config = config.to_model_config()
    manifest, base_dir = _load_manifest(config)
    params = _load_params(config, model_config)
    report = evaluate(params, model_config, manifest,
                      protocol=config.protocol, band_q=config.band_q,
                      base_dir=base_dir)
    out_dir = Path(_require(config, "out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    report.save(out_dir / "report.json")
    print(json.dumps({"map": report.map, "top1": report.cmc[0],
                      "queries": report.num_queries}))
    return EXIT_OK


def _gradcheck_config(seed: int) -> ModelConfig:
    return ModelConfig(d=4, K=5, T=2, n1=2, M=1, heads=1, num_identities=2,
                       seed=seed)


def _gradcheck_objective(config: ModelConfig, seed: int):
    """Full training objective over two identities as fn(params tensor)."""
    rng = np.random.default_rng(seed)
    volumes = [Tensor(rng.normal(size=(config.T, config.K, 4 * config.d)))
               for _ in range(4)]
    subjects = [0, 0, 1, 1]

    def objective(params: ModelParams) -> Tensor:
        embeddings = [forward(v, params, config) for v in volumes]
        samples = list(zip(embeddings, subjects))
        pairs = [PairSample(embeddings[0], embeddings[1], 0, 0),
                 PairSample(embeddings[2], embeddings[3], 1, 1),
                 PairSample(embeddings[0], embeddings[2], 0, 1)]
        return total_loss(samples, pairs, params, config).total

    return objective


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    seed = args.seed if args.seed is not None else 0
    config = _gradcheck_config(seed)
    params = ModelParams.build(config)
    objective = _gradcheck_objective(config, seed)
    worst = 0.0
    worst_name = ""
    # Paired-input parameters do not affect the single-input objective, so
    # checking them here would only compare zeros against zeros.
    names = [n for n in sorted(params.tensors) if not n.startswith("dual.")]
    for name in names:
        original = params.tensors[name]

        def fn(x: Tensor) -> Tensor:
            params.tensors[name] = x
            try:
                return objective(params)
            finally:
                params.tensors[name] = original

        report = grad_check(fn, original, tol=GRADCHECK_TOL)
        if report.max_rel_error > worst:
            worst, worst_name = report.max_rel_error, name
    passed = worst <= GRADCHECK_TOL
    print(f"gradcheck {'pass' if passed else 'FAIL'}: "
          f"max rel. error {worst:.3e} (tol {GRADCHECK_TOL:.1e}) "
          f"at {worst_name}")
    return EXIT_OK if passed else EXIT_RUNTIME


def _cmd_export_heatmap(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    model_config = config.to_model_config()
    manifest, base_dir = _load_manifest(config)
    if not 0 <= args.record < len(manifest.records):
        raise ConfigError(f"record index {args.record} outside "
                          f"[0, {len(manifest.records)})")
    volume = load_record(manifest.records[args.record], base_dir)
    params = _load_params(config, model_config)
    out_dir = Path(_require(config, "out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, pgm_path = export_heatmap(params, model_config, volume,
                                        args.expert, args.target,
                                        out_dir / "heatmap")
    print(json.dumps({"csv": str(csv_path), "pgm": str(pgm_path)}))
    return EXIT_OK


def _cmd_inspect(args: argparse.Namespace) -> int:
    volume = read_volume(args.input)
    t, k, c = volume.data.shape
    print(json.dumps({"T": t, "K": k, "C": c,
                      "subject_id": volume.subject_id,
                      "tracklet_id": volume.tracklet_id,
                      "clothes_id": volume.clothes_id,
                      "camera_id": volume.camera_id}))
    return EXIT_OK


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON run-config file")
    parser.add_argument("--seed", type=int, help="master random seed")
    parser.add_argument("--manifest", help="dataset manifest path")
    parser.add_argument("--checkpoint", help="model checkpoint path")
    parser.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moereid",
        description="Mixture-of-biometric-experts re-identification tool.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a planted-cue dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cue", default="mixed",
                   choices=["long_term", "short_term", "temporal", "mixed"])
    p.add_argument("--subjects", type=int, default=8)
    p.add_argument("--tracklets", type=int, default=4)
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--tokens", type=int, default=17)
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--sc-split", action="store_true")
    p.set_defaults(func=_cmd_gen_synthetic)

    p = sub.add_parser("train", help="fit a model on a manifest")
    _add_config_flags(p)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score queries against the gallery")
    _add_config_flags(p)
    p.add_argument("--protocol", choices=list(PROTOCOLS))
    p.add_argument("--dual-band-q", type=float)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of the full objective")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("export-heatmap", help="render one gating map")
    _add_config_flags(p)
    p.add_argument("--record", type=int, default=0,
                   help="manifest record index to visualize")
    p.add_argument("--expert", type=int, default=0)
    p.add_argument("--target", type=int, default=0)
    p.set_defaults(func=_cmd_export_heatmap)

    p = sub.add_parser("inspect", help="print the header of a volume file")
    p.add_argument("--input", required=True)
    p.set_defaults(func=_cmd_inspect)

    return parser


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help and 2 for usage problems; keep both.
        return int(exc.code) if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        _fail("ConfigError", str(exc))
        return EXIT_CONFIG
    except MoeReidError as exc:
        _fail(type(exc).__name__, str(exc))
        return EXIT_RUNTIME
    except OSError as exc:
        _fail("IOError", str(exc))
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run(sys.argv[1:]))
