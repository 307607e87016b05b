"""Model and run configuration, with a flat ``key = value`` text format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    D: int = 32
    D_img: int = 64
    M: int = 16
    N_max: int = 40
    V: int = 80
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    text_enc_layers: int = 1
    ff_mult: int = 2
    inversion_hidden: int = 0  # 0 means "same as D"
    dropout: float = 0.1
    tau: float = 0.07
    share_embeddings: bool = True
    use_textual_inversion: bool = True
    use_refinement: bool = True
    use_cross_modal_interaction: bool = True
    use_fusion_mlp: bool = True
    use_refine_decoder: bool = True
    inversion_variant: str = "mlp"

    @property
    def S(self):
        # refinement sequence: M pseudo words + the N_max - 1 teacher-forced text positions
        return self.M + self.N_max - 1

    @property
    def H(self):
        return self.inversion_hidden or self.D

    def validate(self):
        if self.D % self.heads:
            raise ConfigError(f"D={self.D} is not divisible by heads={self.heads}")
        if self.V <= 4:
            raise ConfigError("V must exceed 4 to leave room for PAD/BOS/EOS/UNK")
        if self.N_max < 2:
            raise ConfigError("N_max must be at least 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.inversion_variant not in ("mlp", "transformer"):
            raise ConfigError(f"unknown inversion_variant {self.inversion_variant!r}")
        for name in ("D", "D_img", "M", "heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        return self

    @property
    def sr_active(self):
        """Whether the architecture defines a contrastive path at all."""
        return self.use_textual_inversion or self.use_refinement


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    batch_size: int = 8
    steps: int = 3000
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_every: int = 200
    use_rrg_loss: bool = True
    use_sr_loss: bool = True
    sr_weight: float = 1.0  # not from the method description; keep at 1
    data_dir: str = ""
    out_dir: str = "runs"
    run_id: str = "run"

    @property
    def sr_enabled(self):
        return self.use_sr_loss and self.model.sr_active

    def validate(self):
        self.model.validate()
        if not (self.use_rrg_loss or self.sr_enabled):
            raise ConfigError("both loss components are disabled; nothing to optimize")
        if self.sr_enabled and self.batch_size < 2:
            raise ConfigError("contrastive loss needs batch_size >= 2 (no negatives otherwise)")
        if self.steps < 0 or self.eval_every < 0:
            raise ConfigError("steps and eval_every must be non-negative")
        return self

    def replace(self, **changes):
        """Copy with changes; keys may name RunConfig or ModelConfig fields."""
        model_keys = {f.name for f in fields(ModelConfig)}
        mc = {k: v for k, v in changes.items() if k in model_keys}
        rc = {k: v for k, v in changes.items() if k not in model_keys}
        unknown = set(rc) - {f.name for f in fields(RunConfig)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return dataclasses.replace(self, model=dataclasses.replace(self.model, **mc), **rc)


def _coerce(text: str, kind):
    if kind in (bool, "bool"):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        return float(text)
    return text.strip()


def _field_types(cls):
    return {f.name: f.type for f in fields(cls) if f.name != "model"}


def config_to_text(cfg: RunConfig | ModelConfig) -> str:
    items = []
    if isinstance(cfg, RunConfig):
        items += [(f.name, getattr(cfg.model, f.name)) for f in fields(ModelConfig)]
        items += [(f.name, getattr(cfg, f.name)) for f in fields(RunConfig) if f.name != "model"]
    else:
        items += [(f.name, getattr(cfg, f.name)) for f in fields(ModelConfig)]
    return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n" for k, v in items)


def parse_pairs(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def model_config_from_text(text: str) -> ModelConfig:
    types = _field_types(ModelConfig)
    pairs = parse_pairs(text)
    kw = {k: _coerce(v, types[k]) for k, v in pairs.items() if k in types}
    return ModelConfig(**kw)


def run_config_from_text(text: str, base: RunConfig | None = None) -> RunConfig:
    pairs = parse_pairs(text)
    mtypes = _field_types(ModelConfig)
    rtypes = _field_types(RunConfig)
    changes = {}
    for k, v in pairs.items():
        if k in mtypes:
            changes[k] = _coerce(v, mtypes[k])
        elif k in rtypes:
            changes[k] = _coerce(v, rtypes[k])
        else:
            raise ConfigError(f"unknown config key {k!r}")
    return (base or RunConfig()).replace(**changes)


def load_run_config(path) -> RunConfig:
    return run_config_from_text(Path(path).read_text())


def save_run_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(config_to_text(cfg))
