import hashlib, json, logging
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from typing import List, Optional

import yaml
try:
    from yaml import CLoader as Loader, CDumper as Dumper
except ImportError:
    from yaml import Loader, Dumper

from emorag.errors import ConfigError

logger = logging.getLogger(__name__)

MODALITIES = ("t", "v", "a")
DEFAULT_LABEL_NAMES = ["neutral", "happy", "sad", "angry", "surprise", "worried"]


@dataclass
class SynthSpec:
    num_labels: int = 6
    dim: int = 16
    train_per_label: int = 200
    test_per_label: int = 100
    corpus_size: int = 1200
    separation: float = 3.0
    noise_t: float = 1.0
    noise_v: float = 1.0
    noise_a: float = 1.0
    # Pairs of labels whose text centroids nearly coincide
    confusion_pairs: List[List[int]] = field(default_factory=lambda: [[0, 1], [2, 3]])
    confusion_jitter: float = 0.05
    label_names: Optional[List[str]] = None
    # None means "use the run seed"
    seed: Optional[int] = None

    def noise(self, modality):
        return {"t": self.noise_t, "v": self.noise_v, "a": self.noise_a}[modality]

    def names(self):
        if self.label_names:
            return list(self.label_names)
        if self.num_labels <= len(DEFAULT_LABEL_NAMES):
            return DEFAULT_LABEL_NAMES[: self.num_labels]
        return [f"label_{i}" for i in range(self.num_labels)]

    def validate(self):
        if self.num_labels < 2:
            raise ConfigError(f"synth.num_labels must be >= 2, got {self.num_labels}")
        if self.dim < 2:
            raise ConfigError(f"synth.dim must be >= 2, got {self.dim}")
        if self.separation < 0:
            raise ConfigError(f"synth.separation must be >= 0, got {self.separation}")
        for m in MODALITIES:
            if self.noise(m) < 0:
                raise ConfigError(f"synth.noise_{m} must be >= 0, got {self.noise(m)}")
        if min(self.train_per_label, self.test_per_label) < 1 or self.corpus_size < 1:
            raise ConfigError("synth sample counts and corpus_size must be positive")
        for pair in self.confusion_pairs:
            if len(pair) != 2 or pair[0] == pair[1] or not all(0 <= p < self.num_labels for p in pair):
                raise ConfigError(f"synth.confusion_pairs entry {pair} is not a pair of distinct labels")
        if self.label_names is not None and len(self.label_names) != self.num_labels:
            raise ConfigError(f"synth.label_names has {len(self.label_names)} names for {self.num_labels} labels")


@dataclass
class RetrievalConfig:
    k_cog: int = 8
    k_perc: int = 4
    cognitive_space: str = "t"

    def validate(self):
        if self.k_cog < 1 or self.k_perc < 1:
            raise ConfigError(f"retrieval k values must be >= 1, got k_cog={self.k_cog} k_perc={self.k_perc}")
        if self.cognitive_space not in MODALITIES:
            raise ConfigError(f"retrieval.cognitive_space must be one of {MODALITIES}")


@dataclass
class FusionConfig:
    num_experts: int = 4
    top_k: int = 2
    # 0 makes each expert a single linear d->d layer
    expert_hidden: int = 16
    router_hidden: int = 0
    # Mean-pool windows per modality when building the router state; None means one per entry
    pool_size: Optional[int] = None
    learned_projections: bool = False
    perceptual_mode: str = "raaf"

    def validate(self, dim):
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(f"fusion.top_k must be in [1, {self.num_experts}], got {self.top_k}")
        if self.perceptual_mode not in ("raaf", "direct"):
            raise ConfigError(f"fusion.perceptual_mode must be raaf or direct, got {self.perceptual_mode}")
        pool = self.pool_size or dim
        if pool < 1 or dim % pool:
            raise ConfigError(f"fusion.pool_size {pool} must divide the modality dim {dim}")


@dataclass
class AgentConfig:
    hidden: int = 64
    trunk_layers: int = 2
    critic_hidden: int = 64
    planner_sigma: float = 0.3
    init_gain: float = 1.0

    def validate(self):
        if self.hidden < 1 or self.trunk_layers < 1 or self.critic_hidden < 1:
            raise ConfigError("agents.hidden, trunk_layers and critic_hidden must be positive")
        if self.planner_sigma <= 0:
            raise ConfigError(f"agents.planner_sigma must be > 0, got {self.planner_sigma}")


@dataclass
class SFTConfig:
    epochs: int = 5
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    max_grad_norm: float = 1.0
    generator_teacher: str = "vote"

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0 or self.max_grad_norm < 0:
            raise ConfigError("sft.epochs, sft.lr and sft.max_grad_norm must be >= 0, sft.batch_size >= 1")
        if self.generator_teacher not in ("vote", "oracle"):
            raise ConfigError(f"sft.generator_teacher must be vote or oracle, got {self.generator_teacher}")


@dataclass
class TrainConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    # None reuses clip_eps for the value clip
    value_clip_eps: Optional[float] = None
    kl_beta: float = 0.05
    # The reward's log-ratio is averaged over action entries and clipped to
    # +-kl_clip (0 disables the clip), so |penalty| <= kl_beta * kl_clip
    kl_per_entry: bool = True
    kl_clip: float = 1.0
    critic_coef: float = 0.5
    lambda_p: float = 1.0
    lambda_f: float = 1.0
    ppo_epochs: int = 4
    num_minibatches: int = 1
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    max_grad_norm: float = 0.0
    iterations: int = 40
    normalize_advantages: bool = True
    workers: int = 1
    checkpoint_every: int = 1

    @property
    def value_eps(self):
        return self.clip_eps if self.value_clip_eps is None else self.value_clip_eps

    def validate(self):
        if not (0 < self.gamma <= 1 and 0 < self.gae_lambda <= 1):
            raise ConfigError(f"train.gamma and train.gae_lambda must be in (0, 1], got {self.gamma}, {self.gae_lambda}")
        if self.clip_eps <= 0 or self.value_eps <= 0:
            raise ConfigError("train.clip_eps and train.value_clip_eps must be > 0")
        for name in ("kl_beta", "kl_clip", "critic_coef", "lambda_p", "lambda_f", "lr", "max_grad_norm"):
            if getattr(self, name) < 0:
                raise ConfigError(f"train.{name} must be >= 0, got {getattr(self, name)}")
        if self.ppo_epochs < 0 or self.iterations < 0:
            raise ConfigError("train.ppo_epochs and train.iterations must be >= 0")
        if self.batch_size < 1 or not 1 <= self.num_minibatches <= self.batch_size:
            raise ConfigError("train.batch_size must be >= 1 and num_minibatches in [1, batch_size]")
        if self.workers < 1 or self.checkpoint_every < 1:
            raise ConfigError("train.workers and train.checkpoint_every must be >= 1")


@dataclass
class AblationFlags:
    no_planner: bool = False
    no_filter: bool = False
    no_confuse_evidence: bool = False
    no_counter_evidence: bool = False
    drop_modality: str = "none"
    no_retrieval: bool = False
    naive_rag: bool = False
    no_substitution: bool = False
    direct_perceptual: bool = False

    def validate(self):
        if self.drop_modality not in ("none",) + MODALITIES:
            raise ConfigError(f"ablation.drop_modality must be none, t, v or a, got {self.drop_modality}")

    def active(self):
        return {k: v for k, v in asdict(self).items() if v not in (False, "none")}


@dataclass
class RunConfig:
    synth: SynthSpec = field(default_factory=SynthSpec)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    agents: AgentConfig = field(default_factory=AgentConfig)
    sft: SFTConfig = field(default_factory=SFTConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    seed: int = 0
    output_dir: str = "./runs/default"

    @property
    def synth_seed(self):
        return self.seed if self.synth.seed is None else self.synth.seed

    def validate(self):
        if self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed}")
        self.synth.validate()
        self.retrieval.validate()
        self.fusion.validate(self.synth.dim)
        self.agents.validate()
        self.sft.validate()
        self.train.validate()
        self.ablation.validate()
        return self

    def to_dict(self):
        return asdict(self)

    def config_hash(self):
        data = self.to_dict()
        data.pop("output_dir")
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def with_ablation(self, **flags):
        return replace(self, ablation=replace(self.ablation, **flags))

    @classmethod
    def from_dict(cls, data):
        return _build(cls, data or {}, "config").validate()


def _build(klass, data, section):
    if not isinstance(data, dict):
        raise ConfigError(f"section '{section}' must be a mapping, got {type(data).__name__}")

    known = {f.name: f for f in fields(klass)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in section '{section}'", section=section, keys=unknown)

    kwargs = {}
    for name, value in data.items():
        default = getattr(klass(), name)
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, name)
        else:
            kwargs[name] = value
    try:
        return klass(**kwargs)
    except TypeError as e:
        raise ConfigError(f"invalid section '{section}': {e}") from e


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        with open(path, "r") as cfg:
            data = yaml.load(cfg, Loader=Loader)
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}") from e
    logger.debug(f"Loaded config from {path}")
    return RunConfig.from_dict(data)


def dump_config(config: RunConfig, path):
    with open(path, "w") as cfg:
        yaml.dump(config.to_dict(), cfg, Dumper=Dumper, sort_keys=True, default_flow_style=None)
