"""Experiment configuration read from a sectioned ``key = value`` file.

Example::

    [experiment]
    seed = 7
    output_dir = runs/demo

    [sequence]
    generator = global_shift
    width = 64
    height = 48
    frames = 96
    params = dx=2, dy=1

    [eval]
    gop = 32
    metric = psnr
    lambda = 2048

    [sme]
    tau = 10
    scales = 1, 1.25

Unknown keys are rejected so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

from ..imageio import SequenceSpec
from ..mrqa import MSSSIM_LAMBDAS, PSNR_LAMBDAS
from ..sme import DEFAULT_DELTA, HEVC_B_TAU, ScaleSearchConfig
from ..tsmc import DEFAULT_CHANNELS


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 4
    lr: float = 5e-6
    clips: int = 12
    holdout_clips: int = 4
    size: int = 32
    phases: tuple = (0.3, 0.3, 0.4)  # motion, context, all
    offset_penalty: float = 0.0
    finetune_steps: int = 0
    mrqa: bool = False
    max_shift: float = 3.0
    max_rotation: float = 0.05
    max_zoom: float = 0.05
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 0 or self.finetune_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.batch < 1 or self.clips < 1 or self.holdout_clips < 1:
            raise ValueError("batch, clips and holdout_clips must be >= 1")
        if self.size % 4:
            raise ValueError(f"training crop size {self.size} must be divisible by 4")
        if len(self.phases) != 3 or any(p < 0 for p in self.phases) or sum(self.phases) <= 0:
            raise ValueError(f"phases must be three non-negative fractions, got {self.phases}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


@dataclass
class ExperimentConfig:
    sequence: SequenceSpec = field(
        default_factory=lambda: SequenceSpec(64, 48, 96, generator="global_shift", params={"dx": 2.0})
    )
    gop: int = 32
    frames: int = 96
    lam: float = 2048.0
    lambda_max: float = 2048.0
    metric: str = "psnr"
    reference: str = "reconstructed"
    sme: ScaleSearchConfig = field(default_factory=ScaleSearchConfig.hevc_class_b)
    sme_workers: int = 1
    flow_levels: int = 3
    tsmc: bool = True
    channels: tuple = DEFAULT_CHANNELS
    groups: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.gop < 1:
            raise ValueError("gop must be >= 1")
        if self.frames < 2:
            raise ValueError("frame budget must be >= 2")
        if self.metric not in ("psnr", "ms_ssim"):
            raise ValueError(f"metric must be psnr or ms_ssim, got {self.metric!r}")
        if self.reference not in ("reconstructed", "original"):
            raise ValueError(f"reference must be reconstructed or original, got {self.reference!r}")
        if not (self.lambda_max > 0 and 0 < self.lam <= self.lambda_max):
            raise ValueError(f"need 0 < lambda <= lambda_max, got {self.lam}, {self.lambda_max}")

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sme"]["tau"] = repr(self.sme.tau) if math.isinf(self.sme.tau) else self.sme.tau
        return d

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form; the output directory is excluded."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_SCHEMA = {
    "experiment": {"seed", "output_dir"},
    "sequence": {"generator", "path", "width", "height", "frames", "params", "seed"},
    "eval": {"gop", "frames", "metric", "lambda", "lambda_max", "reference", "flow_levels"},
    "sme": {"tau", "scales", "delta", "workers", "enabled"},
    "tsmc": {"enabled", "channels", "groups"},
    "train": {f.name for f in dataclasses.fields(TrainConfig)},
}


def _floats(text: str) -> tuple:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _ints(text: str) -> tuple:
    return tuple(int(t) for t in text.replace(",", " ").split())


def parse_params(text: str) -> dict:
    """``"dx=2, dy=-1.5"`` -> ``{"dx": 2.0, "dy": -1.5}``."""
    out = {}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if "=" not in item:
            raise ValueError(f"bad parameter {item!r}; expected name=value")
        k, v = item.split("=", 1)
        out[k.strip()] = float(v)
    return out


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def config_from_parser(cp: configparser.ConfigParser, source: str = "<config>") -> ExperimentConfig:
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ValueError(f"{source}: unknown section [{section}]")
        unknown = set(cp[section]) - _SCHEMA[section]
        if unknown:
            raise ValueError(f"{source}: unknown keys in [{section}]: {sorted(unknown)}")

    def get(section, key, default=None):
        return cp.get(section, key, fallback=default) if cp.has_section(section) else default

    base = ExperimentConfig()
    seed = int(get("experiment", "seed", base.seed))

    seq = base.sequence
    frames = int(get("eval", "frames", base.frames))
    path = get("sequence", "path")
    generator = get("sequence", "generator")
    if path is None and generator is None:
        generator = seq.generator
    sequence = SequenceSpec(
        int(get("sequence", "width", seq.width)),
        int(get("sequence", "height", seq.height)),
        int(get("sequence", "frames", frames)),
        path=path,
        generator=None if path is not None else generator,
        params=parse_params(get("sequence", "params", "")) if get("sequence", "params") is not None else dict(seq.params),
        seed=int(get("sequence", "seed", seed)),
    )

    metric = get("eval", "metric", base.metric).strip().lower().replace("-", "_")
    default_lambdas = PSNR_LAMBDAS if metric == "psnr" else MSSSIM_LAMBDAS
    lam_max = float(get("eval", "lambda_max", max(default_lambdas)))
    lam = float(get("eval", "lambda", lam_max))

    if cp.has_section("sme") and not _bool(get("sme", "enabled", "true")):
        sme = ScaleSearchConfig.disabled()
    else:
        sme = ScaleSearchConfig(
            scales=_floats(get("sme", "scales", "1 1.25")),
            delta=float(get("sme", "delta", DEFAULT_DELTA)),
            tau=float(get("sme", "tau", HEVC_B_TAU)),
        )

    tr_kw = {}
    if cp.has_section("train"):
        for f in dataclasses.fields(TrainConfig):
            if f.name in cp["train"]:
                raw = cp["train"][f.name]
                if f.name == "phases":
                    tr_kw[f.name] = _floats(raw)
                elif f.name == "mrqa":
                    tr_kw[f.name] = _bool(raw)
                elif f.type in ("int", int):
                    tr_kw[f.name] = int(raw)
                else:
                    tr_kw[f.name] = float(raw)

    return ExperimentConfig(
        sequence=sequence,
        gop=int(get("eval", "gop", base.gop)),
        frames=frames,
        lam=lam,
        lambda_max=lam_max,
        metric=metric,
        reference=get("eval", "reference", base.reference),
        sme=sme,
        sme_workers=int(get("sme", "workers", base.sme_workers)),
        flow_levels=int(get("eval", "flow_levels", base.flow_levels)),
        tsmc=_bool(get("tsmc", "enabled", "true")),
        channels=_ints(get("tsmc", "channels", " ".join(map(str, base.channels)))),
        groups=int(get("tsmc", "groups", base.groups)),
        train=TrainConfig(**tr_kw),
        seed=seed,
        output_dir=get("experiment", "output_dir", base.output_dir),
    )


def load_config(path: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    with open(path) as fh:
        cp.read_file(fh, source=path)
    return config_from_parser(cp, path)


def loads_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.read_string(text)
    return config_from_parser(cp)
