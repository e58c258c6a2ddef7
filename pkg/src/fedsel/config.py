"""Experiment configuration: INI-style text with five sections.

Sections and keys (defaults in parentheses; * marks required keys):

[dataset]
    type*                synthetic | dirichlet-idx | cache
    -- synthetic: alpha (1.0), beta (1.0), clients*, total_samples*,
       powerlaw_exponent (1.5), min_shard (10), feature_dim (60),
       num_classes (10), seed (7)
    -- dirichlet-idx: train_images*, train_labels*, test_images (none),
       test_labels (none), clients*, alpha*, min_shard (10),
       num_classes (inferred), seed (7)
    -- cache: path*
[model]
    kind (logistic)      logistic | mlp
    hidden (128,64 for mlp; empty otherwise)
[train]
    rounds*, tau*, batch_size*, eta0*, lr_milestones (empty),
    m or fraction (exactly one)
[select]
    strategy (rand)      rand | pow-d | rpow-d | ucb-cs
    d (2m for pow-d/rpow-d), gamma (0.7), cold_start (explore),
    debug_dump (false)
[output]
    out_dir (runs), eval_every (10), histogram_bins (10), seeds (1,2,3)

Every validation error names the offending ``section.key``.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .engine import TrainConfig
from .errors import ConfigError
from .selection import COLD_START_MODES, STRATEGY_NAMES

_SECTIONS = ("dataset", "model", "train", "select", "output")


@dataclass
class DatasetConfig:
    type: str
    # synthetic
    alpha: float = 1.0
    beta: float = 1.0
    clients: int = 0
    total_samples: int = 0
    powerlaw_exponent: float = 1.5
    min_shard: int = 10
    feature_dim: int = 60
    num_classes: int | None = None
    seed: int = 7
    # dirichlet-idx
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    # cache
    path: str = ""


@dataclass
class ModelConfig:
    kind: str = "logistic"
    hidden: tuple[int, ...] = ()


@dataclass
class SelectConfig:
    strategy: str = "rand"
    d: int | None = None
    gamma: float = 0.7
    cold_start: str = "explore"
    debug_dump: bool = False

    def resolve_d(self, m: int, num_clients: int) -> int:
        """Poll size for pow-d/rpow-d; defaults to 2m capped at the client count."""
        if self.d is not None:
            return self.d
        return min(2 * m, num_clients)


@dataclass
class OutputConfig:
    out_dir: str = "runs"
    eval_every: int = 10
    histogram_bins: int = 10
    seeds: tuple[int, ...] = (1, 2, 3)


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig
    model: ModelConfig
    train: TrainConfig
    select: SelectConfig
    output: OutputConfig


class _SectionReader:
    """Typed key extraction with section.key qualified errors."""

    def __init__(self, section: str, items: dict[str, str]):
        self.section = section
        self.items = dict(items)
        self.seen: set[str] = set()

    def _raw(self, key: str, required: bool):
        self.seen.add(key)
        if key not in self.items:
            if required:
                raise ConfigError(f"{self.section}.{key}: missing required key")
            return None
        return self.items[key]

    def _typed(self, key: str, convert, typename: str, required: bool, default):
        raw = self._raw(key, required)
        if raw is None:
            return default
        try:
            return convert(raw)
        except ValueError:
            raise ConfigError(f"{self.section}.{key}: expected {typename}, got {raw!r}") from None

    def str_(self, key: str, required=False, default=""):
        value = self._raw(key, required)
        return default if value is None else value

    def int_(self, key: str, required=False, default=0):
        return self._typed(key, int, "an integer", required, default)

    def float_(self, key: str, required=False, default=0.0):
        return self._typed(key, float, "a number", required, default)

    def bool_(self, key: str, default=False):
        raw = self._raw(key, False)
        if raw is None:
            return default
        lowered = raw.strip().lower()
        if lowered in ("true", "yes", "1", "on"):
            return True
        if lowered in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{self.section}.{key}: expected a boolean, got {raw!r}")

    def int_tuple(self, key: str, default=()):
        raw = self._raw(key, False)
        if raw is None:
            return tuple(default)
        raw = raw.strip()
        if not raw:
            return ()
        try:
            return tuple(int(part.strip()) for part in raw.split(","))
        except ValueError:
            raise ConfigError(f"{self.section}.{key}: expected comma-separated integers, got {raw!r}") from None

    def finish(self):
        unknown = sorted(set(self.items) - self.seen)
        if unknown:
            raise ConfigError(f"{self.section}.{unknown[0]}: unknown key")


def parse_config(text: str) -> ExperimentConfig:
    """Parse and fully validate an experiment config from INI text."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{section}: unknown section")
    for required in ("dataset", "train"):
        if required not in cp:
            raise ConfigError(f"{required}: missing required section")

    dataset = _parse_dataset(_SectionReader("dataset", dict(cp["dataset"])))
    model = _parse_model(_SectionReader("model", dict(cp["model"]) if "model" in cp else {}))
    train = _parse_train(_SectionReader("train", dict(cp["train"])))
    select = _parse_select(_SectionReader("select", dict(cp["select"]) if "select" in cp else {}))
    output = _parse_output(_SectionReader("output", dict(cp["output"]) if "output" in cp else {}))

    cfg = ExperimentConfig(dataset, model, train, select, output)
    _validate_cross(cfg)
    return cfg


def _parse_dataset(r: _SectionReader) -> DatasetConfig:
    kind = r.str_("type", required=True)
    if kind == "synthetic":
        cfg = DatasetConfig(
            type=kind,
            alpha=r.float_("alpha", default=1.0),
            beta=r.float_("beta", default=1.0),
            clients=r.int_("clients", required=True),
            total_samples=r.int_("total_samples", required=True),
            powerlaw_exponent=r.float_("powerlaw_exponent", default=1.5),
            min_shard=r.int_("min_shard", default=10),
            feature_dim=r.int_("feature_dim", default=60),
            num_classes=r.int_("num_classes", default=10),
            seed=r.int_("seed", default=7),
        )
    elif kind == "dirichlet-idx":
        num_classes = r.int_("num_classes", default=0)
        cfg = DatasetConfig(
            type=kind,
            train_images=r.str_("train_images", required=True),
            train_labels=r.str_("train_labels", required=True),
            test_images=r.str_("test_images"),
            test_labels=r.str_("test_labels"),
            clients=r.int_("clients", required=True),
            alpha=r.float_("alpha", required=True),
            min_shard=r.int_("min_shard", default=10),
            num_classes=num_classes if num_classes > 0 else None,
            seed=r.int_("seed", default=7),
        )
    elif kind == "cache":
        cfg = DatasetConfig(type=kind, path=r.str_("path", required=True))
    else:
        raise ConfigError(f"dataset.type: unknown dataset type {kind!r}")
    r.finish()
    if kind != "cache" and cfg.clients < 1:
        raise ConfigError("dataset.clients: must be >= 1")
    return cfg


def _parse_model(r: _SectionReader) -> ModelConfig:
    kind = r.str_("kind", default="logistic")
    if kind not in ("logistic", "mlp"):
        raise ConfigError(f"model.kind: unknown model kind {kind!r}")
    default_hidden = (128, 64) if kind == "mlp" else ()
    hidden = r.int_tuple("hidden", default=default_hidden)
    r.finish()
    if kind == "logistic" and hidden:
        raise ConfigError("model.hidden: logistic model takes no hidden layers")
    if kind == "mlp" and len(hidden) != 2:
        raise ConfigError("model.hidden: mlp requires exactly two hidden widths")
    return ModelConfig(kind=kind, hidden=hidden)


def _parse_train(r: _SectionReader) -> TrainConfig:
    rounds = r.int_("rounds", required=True)
    tau = r.int_("tau", required=True)
    batch_size = r.int_("batch_size", required=True)
    eta0 = r.float_("eta0", required=True)
    milestones = r.int_tuple("lr_milestones", default=())
    m = r.int_("m", default=None) if "m" in r.items else None
    r.seen.add("m")
    fraction = r.float_("fraction", default=None) if "fraction" in r.items else None
    r.seen.add("fraction")
    r.finish()
    try:
        return TrainConfig(
            rounds=rounds,
            tau=tau,
            batch_size=batch_size,
            eta0=eta0,
            lr_milestones=milestones,
            m=m,
            fraction=fraction,
        )
    except ConfigError as exc:
        raise ConfigError(f"train: {exc}") from None


def _parse_select(r: _SectionReader) -> SelectConfig:
    strategy = r.str_("strategy", default="rand")
    if strategy not in STRATEGY_NAMES:
        raise ConfigError(
            f"select.strategy: unknown strategy {strategy!r} (expected one of {', '.join(STRATEGY_NAMES)})"
        )
    d = r.int_("d", default=None) if "d" in r.items else None
    r.seen.add("d")
    gamma = r.float_("gamma", default=0.7)
    cold_start = r.str_("cold_start", default="explore")
    debug_dump = r.bool_("debug_dump", default=False)
    r.finish()
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"select.gamma: must lie in [0, 1], got {gamma}")
    if cold_start not in COLD_START_MODES:
        raise ConfigError(f"select.cold_start: unknown mode {cold_start!r}")
    if d is not None and d < 1:
        raise ConfigError("select.d: must be >= 1")
    return SelectConfig(strategy=strategy, d=d, gamma=gamma, cold_start=cold_start, debug_dump=debug_dump)


def _parse_output(r: _SectionReader) -> OutputConfig:
    cfg = OutputConfig(
        out_dir=r.str_("out_dir", default="runs"),
        eval_every=r.int_("eval_every", default=10),
        histogram_bins=r.int_("histogram_bins", default=10),
        seeds=r.int_tuple("seeds", default=(1, 2, 3)),
    )
    r.finish()
    if cfg.eval_every < 1:
        raise ConfigError("output.eval_every: must be >= 1")
    if cfg.histogram_bins < 1:
        raise ConfigError("output.histogram_bins: must be >= 1")
    if not cfg.seeds:
        raise ConfigError("output.seeds: need at least one seed")
    if any(s < 0 for s in cfg.seeds):
        raise ConfigError("output.seeds: seeds must be non-negative")
    return cfg


def _validate_cross(cfg: ExperimentConfig) -> None:
    clients = cfg.dataset.clients if cfg.dataset.type != "cache" else None
    if clients is not None:
        m = cfg.train.resolve_m(clients)
        if cfg.select.strategy in ("pow-d", "rpow-d"):
            d = cfg.select.resolve_d(m, clients)
            if d < m:
                raise ConfigError(f"select.d: d={d} must be at least m={m}")
            if d > clients:
                raise ConfigError(f"select.d: d={d} exceeds the client count {clients}")
    if cfg.dataset.type == "synthetic":
        if cfg.dataset.total_samples < cfg.dataset.clients * cfg.dataset.min_shard:
            raise ConfigError(
                "dataset.total_samples: too small to give every client min_shard samples"
            )


def render_config(cfg: ExperimentConfig) -> str:
    """Render a config back to INI text; parse(render(cfg)) == cfg."""
    lines: list[str] = ["[dataset]", f"type = {cfg.dataset.type}"]
    ds = cfg.dataset
    if ds.type == "synthetic":
        lines += [
            f"alpha = {ds.alpha!r}",
            f"beta = {ds.beta!r}",
            f"clients = {ds.clients}",
            f"total_samples = {ds.total_samples}",
            f"powerlaw_exponent = {ds.powerlaw_exponent!r}",
            f"min_shard = {ds.min_shard}",
            f"feature_dim = {ds.feature_dim}",
            f"num_classes = {ds.num_classes}",
            f"seed = {ds.seed}",
        ]
    elif ds.type == "dirichlet-idx":
        lines += [
            f"train_images = {ds.train_images}",
            f"train_labels = {ds.train_labels}",
        ]
        if ds.test_images:
            lines.append(f"test_images = {ds.test_images}")
        if ds.test_labels:
            lines.append(f"test_labels = {ds.test_labels}")
        lines += [
            f"clients = {ds.clients}",
            f"alpha = {ds.alpha!r}",
            f"min_shard = {ds.min_shard}",
        ]
        if ds.num_classes is not None:
            lines.append(f"num_classes = {ds.num_classes}")
        lines.append(f"seed = {ds.seed}")
    else:
        lines.append(f"path = {ds.path}")

    lines += ["", "[model]", f"kind = {cfg.model.kind}"]
    if cfg.model.hidden:
        lines.append(f"hidden = {','.join(str(h) for h in cfg.model.hidden)}")

    tr = cfg.train
    lines += [
        "",
        "[train]",
        f"rounds = {tr.rounds}",
        f"tau = {tr.tau}",
        f"batch_size = {tr.batch_size}",
        f"eta0 = {tr.eta0!r}",
    ]
    if tr.lr_milestones:
        lines.append(f"lr_milestones = {','.join(str(r) for r in tr.lr_milestones)}")
    if tr.m is not None:
        lines.append(f"m = {tr.m}")
    else:
        lines.append(f"fraction = {tr.fraction!r}")

    sel = cfg.select
    lines += ["", "[select]", f"strategy = {sel.strategy}"]
    if sel.d is not None:
        lines.append(f"d = {sel.d}")
    lines += [
        f"gamma = {sel.gamma!r}",
        f"cold_start = {sel.cold_start}",
        f"debug_dump = {'true' if sel.debug_dump else 'false'}",
    ]

    out = cfg.output
    lines += [
        "",
        "[output]",
        f"out_dir = {out.out_dir}",
        f"eval_every = {out.eval_every}",
        f"histogram_bins = {out.histogram_bins}",
        f"seeds = {','.join(str(s) for s in out.seeds)}",
        "",
    ]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Presets and file loading
# ---------------------------------------------------------------------------


def list_presets() -> list[str]:
    root = resources.files("fedsel") / "presets"
    return sorted(p.name[: -len(".cfg")] for p in root.iterdir() if p.name.endswith(".cfg"))


def load_config(path_or_preset: str | Path) -> ExperimentConfig:
    """Load a config from a file path, or by shipped preset name."""
    path = Path(path_or_preset)
    if path.exists():
        return parse_config(path.read_text())
    name = str(path_or_preset)
    if name.endswith(".cfg"):
        name = name[: -len(".cfg")]
    preset = resources.files("fedsel") / "presets" / f"{name}.cfg"
    if preset.is_file():
        return parse_config(preset.read_text())
    raise ConfigError(
        f"config {path_or_preset!r} is neither a file nor a preset "
        f"(presets: {', '.join(list_presets())})"
    )
