"""Run configuration read from INI-style ``key = value`` sections."""

import configparser
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError


@dataclass
class RunConfig:
    model: str = "mlp-s"
    dataset: str = "synthetic"
    mnist_dir: str | None = None
    seed: int = 0
    output_dir: str = "runs/default"
    # synthetic data
    classes: int = 10
    samples: int = 2000
    dim: int = 16
    # baseline training
    epochs: int = 10
    lr: float = 0.05
    batch_size: int = 32
    momentum: float = 0.9
    # fine-tuning (reward and final); lr = lr * finetune_lr_scale
    finetune_lr_scale: float = 0.1
    finetune_epochs: int = 1
    # Hessian probes
    probe_m: int = 50
    probe_n: int = 50
    probe_batch: int = 64
    # budgets: weight compression (x) and average activation bits
    budget_wcomp: float = 32.0 / 3.0
    budget_abits: float = 4.0
    # search
    episodes: int = 120
    reward_train: int | None = 1000
    reward_eval: int | None = 500
    compare_uniform: bool = True
    bits: tuple = field(default=(2, 3, 4, 5, 6, 7, 8))

    def validate(self):
        if self.model not in ("mlp-s", "convnet-s"):
            raise ConfigError(f"unknown model {self.model!r}")
        if self.dataset not in ("mnist", "synthetic"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.dataset == "mnist":
            if not self.mnist_dir or not Path(self.mnist_dir).is_dir():
                raise ConfigError(f"mnist_dir {self.mnist_dir!r} is not a directory")
        if self.model == "convnet-s" and self.dataset != "mnist":
            raise ConfigError("convnet-s needs 28x28 MNIST inputs")
        if tuple(self.bits) != (2, 3, 4, 5, 6, 7, 8):
            raise ConfigError("the bit set is fixed to 2..8")
        if not 32.0 / 8.0 <= self.budget_wcomp <= 32.0 / 2.0:
            raise ConfigError("budget_wcomp must lie in [4, 16] for bits 2..8")
        if not 2.0 <= self.budget_abits <= 8.0:
            raise ConfigError("budget_abits must lie in [2, 8]")
        for name in ("epochs", "finetune_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("probe_m", "probe_n", "probe_batch", "episodes", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        return self

    def to_dict(self):
        d = asdict(self)
        d["bits"] = list(self.bits)
        return d


_SECTIONS = {
    "run": ("model", "dataset", "mnist_dir", "seed", "output_dir"),
    "synthetic": ("classes", "samples", "dim"),
    "train": ("epochs", "lr", "batch_size", "momentum", "finetune_lr_scale", "finetune_epochs"),
    "probe": ("probe_m", "probe_n", "probe_batch"),
    "budget": ("budget_wcomp", "budget_abits"),
    "search": ("episodes", "reward_train", "reward_eval", "compare_uniform"),
}


def _convert(name, text):
    default = RunConfig.__dataclass_fields__[name].default
    if text.lower() in ("none", ""):
        return None
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {text!r}")
    if name in ("seed", "classes", "samples", "dim", "epochs", "batch_size", "finetune_epochs",
                "probe_m", "probe_n", "probe_batch", "episodes", "reward_train", "reward_eval"):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def parse_config(text, base_dir=None):
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from e
    values = {}
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in cp[section].items():
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                values[key] = _convert(key, raw.strip())
            except ValueError as e:
                raise ConfigError(f"{section}.{key}: {e}") from e
    cfg = RunConfig(**values)
    if base_dir is not None and cfg.mnist_dir and not Path(cfg.mnist_dir).is_absolute():
        cfg.mnist_dir = str(Path(base_dir) / cfg.mnist_dir)
    return cfg.validate()


def load_config(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    return parse_config(path.read_text(), base_dir=path.parent)


def dump_config(cfg):
    lines = []
    d = cfg.to_dict()
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        for k in keys:
            lines.append(f"{k} = {d[k]}")
        lines.append("")
    return "\n".join(lines)
