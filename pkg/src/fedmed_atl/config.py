"""Experiment configuration: scenario documents, variants and run manifests.

A scenario is a JSON object. Every key is optional; command-line flags
override the document. Example::

    {
      "experiment": "phantom",
      "corpus": "data/phantom",
      "slices": [0, 7],
      "image_size": 64,
      "test_volumes": 4,
      "noise": "severe",
      "clients": [
        {"id": "client1", "proportion": 0.4, "pairing": "paired"},
        {"id": "client2", "proportion": 0.3},
        {"id": "client3", "proportion": 0.2},
        {"id": "client4", "proportion": 0.1}
      ],
      "variant": "atl",
      "views": 4,
      "seed": 0,
      "train": {"rounds": 3, "local_epochs": 3, "batch_size": 4, "learning_rate": 1e-4},
      "net": {"gen_depth": 3, "gen_base": 16, "disc_base": 16, "disc_layers": 3},
      "dp": {"enabled": false, "clip_bound": 1.0, "noise_multiplier": 1.07}
    }
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .federated import DPConfig, TrainConfig
from .losses import LossWeights
from .mud import NOISE_LEVELS, ClientSpec, check_proportions, hospital_scenario, noise_level
from .networks import NetConfig

VARIANTS = ("baseline", "reggan", "atl", "ar-only", "at-only", "as-only")
VIEW_CHOICES = (1, 2, 4)
NOISE_CHOICES = ("slight", "severe")

# ablation rows in table order: (label, variant, views)
ABLATION_ROWS = (
    ("FedMed-C-AR", "ar-only", 4),
    ("FedMed-C-AT", "at-only", 4),
    ("FedMed-C-AS", "as-only", 4),
    ("FedMed-C-ATL-1View", "atl", 1),
    ("FedMed-C-ATL-2Views", "atl", 2),
    ("FedMed-C-ATL-4Views", "atl", 4),
)

_VARIANT_KINDS = {"baseline": (), "atl": ("rot", "trans", "scale"),
                  "ar-only": ("rot",), "at-only": ("trans",), "as-only": ("scale",)}

ALL_SLICES = (-(2 ** 31), 2 ** 31 - 1)
PAPER_SLICES = (50, 80)


class ConfigError(ValueError):
    pass


def method_label(variant: str, views: int) -> str:
    """Row label in the naming scheme of the result tables."""
    if variant == "baseline":
        return "FedMed-C"
    if variant == "reggan":
        return "FedMed-C (+reggan)"
    if variant == "atl":
        return f"FedMed-C-ATL-{views}View" + ("s" if views > 1 else "")
    return "FedMed-C-" + {"ar-only": "AR", "at-only": "AT", "as-only": "AS"}[variant]


def variant_weights(variant: str, base: LossWeights | None = None) -> LossWeights:
    base = base or LossWeights()
    if variant == "reggan":
        raise ConfigError("variant 'reggan' (correction loss + registration network) is not implemented")
    if variant not in _VARIANT_KINDS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    return base.only(*_VARIANT_KINDS[variant])


def _dataclass_from(cls, data: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "phantom"
    scenario_path: str | None = None
    corpus: str | None = None
    out_dir: str | None = None
    variant: str = "atl"
    views_k: int = 4
    noise: str | None = None  # overrides every client's noise level when set
    clients: tuple[ClientSpec, ...] = field(default_factory=lambda: tuple(hospital_scenario("severe")))
    slices: tuple[int, int] = ALL_SLICES
    image_size: int = 64
    test_volumes: int = 4
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    dp: DPConfig = field(default_factory=DPConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.views_k not in VIEW_CHOICES:
            raise ConfigError(f"views must be one of {VIEW_CHOICES}, got {self.views_k}")
        if self.noise is not None and self.noise not in NOISE_LEVELS:
            raise ConfigError(f"unknown noise level {self.noise!r}")
        if not self.clients:
            raise ConfigError("scenario defines no clients")
        ids = [c.client_id for c in self.clients]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate client ids in {ids}")
        try:
            check_proportions([c.proportion for c in self.clients])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.slices[0] > self.slices[1]:
            raise ConfigError(f"empty slice window {self.slices}")
        if self.test_volumes < 1:
            raise ConfigError("test_volumes must be >= 1")

    @property
    def label(self) -> str:
        return method_label(self.variant, self.views_k)

    def client_specs(self) -> list[ClientSpec]:
        if self.noise is None:
            return list(self.clients)
        return [replace(c, noise=noise_level(self.noise)) for c in self.clients]

    @property
    def noise_label(self) -> str:
        names = {c.noise.name for c in self.client_specs()}
        return names.pop() if len(names) == 1 else "mixed"

    def train_config(self) -> TrainConfig:
        """TrainConfig with the variant's loss weights, the view count and the seed applied."""
        return replace(self.train, weights=variant_weights(self.variant, self.train.weights),
                       views_k=self.views_k, seed=self.seed)

    def to_dict(self) -> dict:
        d = {
            "experiment": self.experiment,
            "corpus": self.corpus,
            "variant": self.variant,
            "views": self.views_k,
            "noise": self.noise,
            "clients": [{"id": c.client_id, "proportion": c.proportion, "pairing": c.pairing,
                         "noise": c.noise.name, "paired_fraction": c.paired_fraction} for c in self.clients],
            "slices": list(self.slices),
            "image_size": self.image_size,
            "test_volumes": self.test_volumes,
            "seed": self.seed,
            "train": {k: v for k, v in asdict(self.train).items() if k not in ("weights", "net", "seed", "views_k")},
            "weights": asdict(self.train.weights),
            "net": asdict(self.train.net),
            "dp": asdict(self.dp),
        }
        return d

    def digest(self) -> str:
        """SHA-256 of the canonical JSON of the resolved configuration (paths excluded)."""
        d = self.to_dict()
        d.pop("corpus")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def _clients_from(items: list, default_noise: str) -> tuple[ClientSpec, ...]:
    specs = []
    for i, item in enumerate(items):
        if not isinstance(item, dict):
            raise ConfigError(f"clients[{i}] must be an object")
        unknown = set(item) - {"id", "proportion", "pairing", "noise", "paired_fraction"}
        if unknown:
            raise ConfigError(f"clients[{i}]: unknown keys {sorted(unknown)}")
        try:
            specs.append(ClientSpec(
                client_id=str(item.get("id", f"client{i + 1}")),
                proportion=float(item["proportion"]),
                pairing=item.get("pairing", "unpaired"),
                noise=item.get("noise", default_noise),
                paired_fraction=float(item.get("paired_fraction", 0.5)),
            ))
        except KeyError:
            raise ConfigError(f"clients[{i}]: missing 'proportion'") from None
        except ValueError as exc:
            raise ConfigError(f"clients[{i}]: {exc}") from None
    return tuple(specs)


def config_from_dict(doc: dict, paper_scale: bool = False) -> ExperimentConfig:
    """Build an ExperimentConfig from a scenario document."""
    doc = dict(doc)
    known = {"experiment", "corpus", "variant", "views", "noise", "clients", "slices", "image_size",
             "test_volumes", "seed", "train", "weights", "net", "dp"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"scenario: unknown keys {sorted(unknown)}")
    net_defaults = asdict(NetConfig.paper_scale() if paper_scale else NetConfig())
    net = _dataclass_from(NetConfig, {**net_defaults, **doc.get("net", {})}, "net")
    weights = _dataclass_from(LossWeights, doc.get("weights", {}), "weights")
    train_doc = dict(doc.get("train", {}))
    for reserved in ("weights", "net", "seed", "views_k"):
        if reserved in train_doc:
            raise ConfigError(f"train: set {reserved!r} at the top level of the scenario")
    train = _dataclass_from(TrainConfig, {**train_doc, "weights": weights, "net": net}, "train")
    dp = _dataclass_from(DPConfig, doc.get("dp", {}), "dp")
    noise = doc.get("noise")
    default_noise = noise or "severe"
    if default_noise not in NOISE_LEVELS:
        raise ConfigError(f"unknown noise level {default_noise!r}")
    clients = (_clients_from(doc["clients"], default_noise) if "clients" in doc
               else tuple(hospital_scenario(default_noise)))
    slices = tuple(int(v) for v in doc.get("slices", PAPER_SLICES if paper_scale else ALL_SLICES))
    if len(slices) != 2:
        raise ConfigError("slices must be [first, last]")
    return ExperimentConfig(
        experiment=str(doc.get("experiment", "phantom")),
        corpus=doc.get("corpus"),
        variant=doc.get("variant", "atl"),
        views_k=int(doc.get("views", 4)),
        noise=noise,
        clients=clients,
        slices=slices,
        image_size=int(doc.get("image_size", net.image_size)),
        test_volumes=int(doc.get("test_volumes", 4)),
        seed=int(doc.get("seed", 0)),
        train=train,
        dp=dp,
    )


def load_scenario(path: str | Path | None, paper_scale: bool = False) -> ExperimentConfig:
    if path is None:
        return config_from_dict({}, paper_scale)
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: scenario file not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: scenario must be a JSON object")
    cfg = config_from_dict(doc, paper_scale)
    return replace(cfg, scenario_path=str(path))


@dataclass
class RunManifest:
    config_digest: str
    seeds: dict
    started: str
    finished: str | None = None
    checkpoints: list[str] = field(default_factory=list)
    metrics_csv: str | None = None
    montages: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    status: str = "running"

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path
