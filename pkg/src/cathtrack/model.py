"""The trainable pieces of a tracker bundled with their configuration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .flow import FlowConfig, FlowNet
from .fusion import DEFAULT_ALPHA, MASK_CUTOFF, Refiner
from .localizer import Localizer, LocalizerConfig


@dataclass
class TrackerConfig:
    use_flow: bool = True
    multi_templates: bool = True
    update_interval: float = 5          # frames between template refreshes; inf disables
    conf_threshold: float = 0.7
    alpha: float = DEFAULT_ALPHA
    mask_cutoff: float = MASK_CUTOFF
    sigma: float = 2.0
    flow_margin: int = 16
    refine_width: int = 16

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.update_interval >= 1:
            raise ValueError("update_interval must be >= 1 (inf disables updates)")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["update_interval"] == float("inf"):
            d["update_interval"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrackerConfig":
        d = dict(d)
        if d.get("update_interval") == "inf":
            d["update_interval"] = float("inf")
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class TrackerModel:
    """Localizer + optional flow network + refinement head."""

    def __init__(self, loc_config: LocalizerConfig, tracker_config: TrackerConfig,
                 flow_config: FlowConfig | None = None, seed: int = 0):
        self.loc_config = loc_config
        self.tracker_config = tracker_config
        self.flow_config = flow_config or FlowConfig()
        self.localizer = Localizer(loc_config, seed=seed)
        self.refiner = Refiner(seed=seed + 1, width=tracker_config.refine_width)
        self.flow = FlowNet(self.flow_config, seed=seed + 2) if tracker_config.use_flow else None

    @property
    def toggles(self) -> dict:
        return {"multitask": self.loc_config.multitask, "flow": self.tracker_config.use_flow,
                "multi_templates": self.tracker_config.multi_templates}

    @property
    def n_templates(self) -> int:
        return self.loc_config.max_templates if self.tracker_config.multi_templates else 1

    def config_dict(self) -> dict:
        return {"localizer": self.loc_config.to_dict(), "tracker": self.tracker_config.to_dict(),
                "flow": self.flow_config.to_dict()}

    def save(self, path, extra: dict | None = None):
        sections = {"localizer": self.localizer.state_dict(), "refine": self.refiner.state_dict()}
        if self.flow is not None:
            sections["flow"] = self.flow.state_dict()
        cfg = self.config_dict()
        if extra:
            cfg["meta"] = extra
        return save_checkpoint(path, cfg, sections)

    @classmethod
    def load(cls, path) -> "TrackerModel":
        cfg, sections = load_checkpoint(path)
        try:
            loc = LocalizerConfig(**cfg["localizer"])
            trk = TrackerConfig.from_dict(cfg["tracker"])
            flw = FlowConfig(**cfg["flow"])
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"{path}: config block incomplete ({exc})") from exc
        model = cls(loc, trk, flw)
        model.localizer.load_state_dict(sections.get("localizer", {}))
        model.refiner.load_state_dict(sections.get("refine", {}))
        if model.flow is not None:
            if "flow" not in sections:
                raise CheckpointError(f"{path}: flow enabled but no 'flow/' section")
            model.flow.load_state_dict(sections["flow"])
        return model
