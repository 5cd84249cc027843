"""Configuration objects and the flat ``key = value`` config file format.

Defaults follow the reference training recipe: vocabulary cap 400,
embedding 50, hidden 150, Adam(0.005, 0.9, 0.999, 1e-8), gradient values
clamped to [-5, 5], l2 weight 1e-5, mini-batch 64, greedy search at
generation time.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, ParseError

SCHEME_NAMES = ("S1", "S2", "S3", "S4")
VARIANT_NAMES = ("V1", "V2", "V3")

SPECIAL_TOKENS = ("<pad>", "<unk>", "<bos>", "<eos>")
PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3


@dataclass
class VariantConfig:
    """Architecture toggles: attention on/off, cell kind, widths."""

    attention_enabled: bool = True
    cell_kind: str = "lstm"          # "lstm" or "gru"
    hidden_size: int = 150
    embedding_size: int = 50
    attn_size: int | None = None     # defaults to hidden_size
    gate_hidden: int = 128           # gating MLP hidden width
    gate_out: int = 32               # gating query / expert key width

    def __post_init__(self) -> None:
        if self.cell_kind not in ("lstm", "gru"):
            raise ConfigError(f"unknown cell kind {self.cell_kind!r} (expected lstm or gru)")
        for name in ("hidden_size", "embedding_size", "gate_hidden", "gate_out"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.attn_size is None:
            self.attn_size = self.hidden_size
        elif self.attn_size < 1:
            raise ConfigError("attn_size must be >= 1")

    @classmethod
    def from_name(cls, name: str, **overrides) -> "VariantConfig":
        """Presets: V1 drops attention, V2 swaps in GRU cells, V3 shrinks hidden to 100."""
        presets = {
            "V1": {"attention_enabled": False},
            "V2": {"cell_kind": "gru"},
            "V3": {"hidden_size": 100},
        }
        if name not in presets:
            raise ConfigError(f"unknown variant {name!r} (expected one of {VARIANT_NAMES})")
        merged = dict(presets[name])
        merged.update(overrides)
        return cls(**merged)


@dataclass
class SchemeConfig:
    """Loss wiring for one learning scheme.

    S1: mixture on, expert weights and lambda both learnable.
    S2: mixture on, lambda fixed at 0.0 (expert weights unused).
    S3: mixture off (combined distribution is the chair's own), uniform
        expert weights 1/k, lambda 0.5.
    S4: mixture on, uniform expert weights 1/k, lambda 0.5.
    """

    scheme: str
    moe_enabled: bool
    mu_mode: str                 # "learnable" | "uniform" | "unused"
    lambda_mode: str             # "learnable" | "fixed"
    lambda_value: float | None   # set when lambda_mode == "fixed"

    @classmethod
    def from_name(cls, name: str) -> "SchemeConfig":
        table = {
            "S1": cls("S1", True, "learnable", "learnable", None),
            "S2": cls("S2", True, "unused", "fixed", 0.0),
            "S3": cls("S3", False, "uniform", "fixed", 0.5),
            "S4": cls("S4", True, "uniform", "fixed", 0.5),
        }
        if name not in table:
            raise ConfigError(f"unknown scheme {name!r} (expected one of {SCHEME_NAMES})")
        return table[name]

    def __post_init__(self) -> None:
        if self.lambda_mode == "fixed":
            if self.lambda_value is None or not 0.0 <= self.lambda_value <= 1.0:
                raise ConfigError(f"fixed lambda must lie in [0, 1], got {self.lambda_value}")


@dataclass
class OptimizerConfig:
    alpha: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    clip_low: float = -5.0
    clip_high: float = 5.0
    l2_weight: float = 1e-5
    batch_size: int = 64

    def __post_init__(self) -> None:
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ConfigError("beta1 and beta2 must lie strictly in (0, 1)")
        if self.alpha < 0:
            # alpha = 0 is allowed: a frozen-parameter dry run.
            raise ConfigError("alpha must not be negative")
        if self.clip_low > self.clip_high:
            raise ConfigError("clip_low must not exceed clip_high")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class RunConfig:
    """One training/evaluation run: scheme + variant + optimizer + paths."""

    scheme: str = "S4"
    variant: str | None = None   # optional V1/V2/V3 preset applied before field overrides
    attention_enabled: bool = True
    cell_kind: str = "lstm"
    hidden_size: int = 150
    embedding_size: int = 50
    attn_size: int | None = None
    gate_hidden: int = 128
    gate_out: int = 32
    vocab_cap: int = 400
    alpha: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    clip_low: float = -5.0
    clip_high: float = 5.0
    l2_weight: float = 1e-5
    batch_size: int = 64
    seed: int = 13
    epochs: int = 10
    max_gen_len: int = 40
    single_module: bool = False  # one decoder, no gating (requires scheme S3)
    train_path: str = ""
    valid_path: str = ""
    test_path: str = ""
    out_dir: str = "run"

    def __post_init__(self) -> None:
        if self.scheme not in SCHEME_NAMES:
            raise ConfigError(f"unknown scheme {self.scheme!r} (expected one of {SCHEME_NAMES})")
        if self.single_module and self.scheme != "S3":
            raise ConfigError("single_module mode is only defined for scheme S3")
        if self.vocab_cap < len(SPECIAL_TOKENS) + 1:
            raise ConfigError(f"vocab_cap must exceed the {len(SPECIAL_TOKENS)} reserved specials")

    def scheme_config(self) -> SchemeConfig:
        return SchemeConfig.from_name(self.scheme)

    def variant_config(self) -> VariantConfig:
        kwargs = dict(
            attention_enabled=self.attention_enabled,
            cell_kind=self.cell_kind,
            hidden_size=self.hidden_size,
            embedding_size=self.embedding_size,
            attn_size=self.attn_size,
            gate_hidden=self.gate_hidden,
            gate_out=self.gate_out,
        )
        return VariantConfig(**kwargs)

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(
            alpha=self.alpha, beta1=self.beta1, beta2=self.beta2, epsilon=self.epsilon,
            clip_low=self.clip_low, clip_high=self.clip_high,
            l2_weight=self.l2_weight, batch_size=self.batch_size,
        )

    def to_mapping(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if isinstance(value, bool):
                out[f.name] = "true" if value else "false"
            else:
                out[f.name] = str(value)
        return out

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "RunConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs: dict[str, object] = {}
        variant = mapping.get("variant")
        if variant is not None:
            preset = VariantConfig.from_name(variant)
            for name in ("attention_enabled", "cell_kind", "hidden_size", "embedding_size"):
                kwargs[name] = getattr(preset, name)
            kwargs["variant"] = variant
        for key, raw in mapping.items():
            if key == "variant":
                continue
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, raw, fields[key].type)
        return cls(**kwargs)  # type: ignore[arg-type]


def _coerce(key: str, raw, annotation: str):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    ann = str(annotation)
    if "bool" in ann:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"config key {key!r}: expected a boolean, got {raw!r}")
    try:
        if "int" in ann and "None" not in ann:
            return int(text)
        if ann.startswith("int"):
            return int(text)
        if "float" in ann:
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from None
    return text


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Read a flat ``key = value`` file; '#' starts a comment, blanks ignored."""
    mapping: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ParseError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        mapping[key.strip()] = value.strip()
    return mapping


def load_run_config(path: str | Path) -> RunConfig:
    return RunConfig.from_mapping(parse_config_file(path))


def write_config_file(config: RunConfig, path: str | Path) -> None:
    lines = [f"{key} = {value}" for key, value in config.to_mapping().items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
