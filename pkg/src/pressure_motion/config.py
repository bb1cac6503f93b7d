"""Run configuration: five sections loaded from YAML, unknown keys rejected."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml

from .diffusion import BackboneTrainConfig, DenoiserConfig, NoiseSchedule, make_schedule
from .evaluation import CoPConfig, EvaluatorConfig
from .features import ShiftNetConfig, TrajNetConfig, TrajTrainConfig
from .storage import digest
from .synth import KINDS, DataConfig, WorldConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    n_sequences: int = 100
    kinds: tuple[str, ...] = KINDS
    duration_min: int = 40
    duration_max: int = 160
    mass_min: float = 45.0
    mass_max: float = 105.0
    scale_min: float = 0.92
    scale_max: float = 1.08
    augment_copies: int = 1
    mat_height: int = 64
    mat_width: int = 64
    mat_scale: float = 0.06
    sigma_px: float = 2.0
    contact_height: float = 0.05
    contact_vel: float = 0.005
    support_tau: float = 0.05
    clip_len: int = 40
    clip_stride: int = 10


@dataclass
class ModelSection:
    latent: int = 512
    layers: int = 4
    heads: int = 4
    ff: int = 1024
    dropout: float = 0.10
    max_len: int = 196
    text_dim: int = 512
    traj_channels: tuple[int, int, int] = (8, 16, 32)
    traj_hidden: int = 256
    shift_enc_dim: int = 16
    shift_branch_channels: int = 8
    shift_mid_channels: int = 16
    shift_kernels: tuple[int, ...] = (3, 5, 7)
    input_pool: int = 2
    pressure_scale: float = 10.0


@dataclass
class TrainingSection:
    steps: int = 100_000
    batch_size: int = 16
    lr: float = 1e-5
    weight_decay: float = 1e-2
    lambda_diff: float = 1.0
    lambda_cons: float = 5.0
    text_drop: float = 0.10
    grad_clip: float = 1.0
    log_every: int = 100
    ckpt_every: int = 0
    backbone_steps: int = 2000
    backbone_lr: float = 2e-4
    backbone_batch_size: int = 16
    traj_steps: int = 1500
    traj_lr: float = 1e-3
    traj_batch_size: int = 16


@dataclass
class SamplingSection:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    beta_rescale: bool = False
    cfg_scale: float = 5.0
    control_scale: str = "unit"


@dataclass
class EvalSection:
    cop_tau: float = 0.05
    skate_vel: float = 0.005
    traj_threshold: float = 0.5
    rprec_k: int = 3
    rprec_batch: int = 32
    evaluator_steps: int = 1500
    evaluator_lr: float = 1e-3
    caption_level: int = 0


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = 0

    # -------------------------------------------------------------- io
    def to_dict(self) -> dict:
        def conv(v):
            if isinstance(v, tuple):
                return [conv(x) for x in v]
            if isinstance(v, dict):
                return {k: conv(x) for k, x in v.items()}
            return v
        return conv(dataclasses.asdict(self))

    def digest(self) -> str:
        return digest(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in d:
                continue
            if f.name == "seed":
                kwargs["seed"] = int(d["seed"])
                continue
            kwargs[f.name] = _build_section(f.default_factory, f.name, d[f.name])
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            try:
                raw = yaml.safe_load(fh)
            except yaml.YAMLError as e:
                raise ConfigError(f"{path}: malformed YAML ({e})") from None
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(raw)

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)

    # -------------------------------------------------------------- builders
    def world(self) -> WorldConfig:
        d = self.data
        return WorldConfig(d.mat_height, d.mat_width, d.mat_scale, d.sigma_px, d.contact_height,
                           d.contact_vel, d.support_tau)

    def data_config(self) -> DataConfig:
        d = self.data
        return DataConfig(d.n_sequences, tuple(d.kinds), d.duration_min, d.duration_max, d.mass_min, d.mass_max,
                          d.scale_min, d.scale_max, d.augment_copies, self.seed, self.world())

    def denoiser_config(self) -> DenoiserConfig:
        m = self.model
        return DenoiserConfig(m.latent, m.layers, m.heads, m.ff, m.dropout, m.max_len, m.text_dim)

    def traj_net_config(self) -> TrajNetConfig:
        m, d = self.model, self.data
        return TrajNetConfig(d.mat_height, d.mat_width, d.mat_scale, tuple(m.traj_channels), m.input_pool,
                             m.traj_hidden, 4, m.pressure_scale)

    def shift_net_config(self) -> ShiftNetConfig:
        m, d = self.model, self.data
        return ShiftNetConfig(d.mat_height, d.mat_width, m.shift_enc_dim, m.shift_branch_channels,
                              m.shift_mid_channels, tuple(m.shift_kernels), m.input_pool, m.pressure_scale)

    def traj_train_config(self) -> TrajTrainConfig:
        t = self.training
        return TrajTrainConfig(t.traj_steps, t.traj_batch_size, self.data.clip_len, t.traj_lr, log_every=t.log_every)

    def backbone_train_config(self) -> BackboneTrainConfig:
        t = self.training
        return BackboneTrainConfig(t.backbone_steps, t.backbone_batch_size, t.backbone_lr, text_drop=t.text_drop,
                                   log_every=t.log_every)

    def train_config(self) -> TrainConfig:
        t = self.training
        return TrainConfig(t.steps, t.batch_size, t.lr, t.weight_decay, t.lambda_diff, t.lambda_cons, t.text_drop,
                           t.grad_clip, t.log_every, t.ckpt_every)

    def schedule(self) -> NoiseSchedule:
        s = self.sampling
        return make_schedule(s.T, s.beta_start, s.beta_end, s.beta_rescale)

    def cop_config(self) -> CoPConfig:
        return CoPConfig(self.eval.cop_tau)

    def evaluator_config(self) -> EvaluatorConfig:
        return EvaluatorConfig(self.eval.evaluator_steps, self.eval.rprec_batch, self.eval.evaluator_lr)


def _build_section(factory, name: str, values):
    if values is None:
        return factory()
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    default = factory()
    known = {f.name: f for f in dataclasses.fields(default)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {sorted(unknown)}")
    kwargs = {}
    for k, v in values.items():
        cur = getattr(default, k)
        try:
            if isinstance(cur, bool):
                if not isinstance(v, bool):
                    raise TypeError
                kwargs[k] = v
            elif isinstance(cur, tuple):
                kwargs[k] = tuple(v)
            elif isinstance(cur, (int, float, str)):
                kwargs[k] = type(cur)(v)
                if isinstance(cur, int) and not isinstance(cur, bool) and float(v) != int(v):
                    raise TypeError
            else:
                kwargs[k] = v
        except (TypeError, ValueError):
            raise ConfigError(f"{name}.{k}: cannot use {v!r} as {type(cur).__name__}") from None
    return dataclasses.replace(default, **kwargs)


def desk_config(seed: int = 0) -> RunConfig:
    """CPU-sized preset used by the experiment script and the acceptance suite."""
    return RunConfig(
        data=DataSection(n_sequences=250, duration_min=40, duration_max=80),
        model=ModelSection(latent=128, layers=4, heads=4, ff=256),
        training=TrainingSection(steps=1000, lr=3e-4, backbone_steps=2000, backbone_lr=5e-4, traj_steps=600,
                                 log_every=200),
        sampling=SamplingSection(T=100, beta_rescale=True),
        eval=EvalSection(evaluator_steps=600),
        seed=seed,
    )
