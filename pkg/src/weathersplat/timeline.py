"""Weather timeline: the single authority for render-time weather state.

A timeline holds base settings (active weather label, fog, wind, rain/snow
particle parameters) plus per-frame overrides and node edits. The render
loop applies each frame's overrides before simulating/rendering that frame,
so particle state stays sequential.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import torch
import yaml

from .scene import RAW_WEATHER, SceneGraph
from .weather import (RAIN, SNOW, BoundingBox, FogParams, ParticleSystem,
                      WindParams, particle_bounds, spawn)


@dataclass
class ParticleSettings:
    enabled: bool = False
    count: int | None = None        # published default per kind when None
    seed: int = 0
    fall_speed: float | None = None
    opacity: float | None = None
    volume: BoundingBox | None = None

    @classmethod
    def from_dict(cls, d: dict | None) -> "ParticleSettings":
        if not d:
            return cls()
        volume = None
        if "volume" in d:
            volume = BoundingBox(torch.tensor(d["volume"]["lo"], dtype=torch.float64),
                                 torch.tensor(d["volume"]["hi"], dtype=torch.float64))
        return cls(enabled=True, count=d.get("count"), seed=int(d.get("seed", 0)),
                   fall_speed=d.get("fall_speed"), opacity=d.get("opacity"), volume=volume)


@dataclass
class FrameEdit:
    weather: str | None = None
    fog: dict | None = None
    wind: dict | None = None
    rain: dict | None = None
    snow: dict | None = None
    nodes: list[dict] = field(default_factory=list)


@dataclass
class WeatherTimeline:
    weather: str = RAW_WEATHER
    fog: FogParams | None = None
    wind: WindParams = field(default_factory=WindParams)
    rain: ParticleSettings = field(default_factory=ParticleSettings)
    snow: ParticleSettings = field(default_factory=ParticleSettings)
    frame_edits: dict[int, FrameEdit] = field(default_factory=dict)
    dt: float = 1.0 / 30.0

    @classmethod
    def from_file(cls, path: str | Path) -> "WeatherTimeline":
        doc = yaml.safe_load(Path(path).read_text()) or {}
        return cls.from_dict(doc)

    @classmethod
    def from_dict(cls, doc: dict) -> "WeatherTimeline":
        tl = cls()
        tl.weather = doc.get("weather", RAW_WEATHER)
        if "fog" in doc and doc["fog"] is not None:
            tl.fog = _fog_from_dict(doc["fog"])
        if "wind" in doc and doc["wind"] is not None:
            tl.wind = _wind_from_dict(doc["wind"])
        tl.rain = ParticleSettings.from_dict(doc.get("rain"))
        tl.snow = ParticleSettings.from_dict(doc.get("snow"))
        tl.dt = float(doc.get("dt", 1.0 / 30.0))
        for key, edit in (doc.get("frames") or {}).items():
            tl.frame_edits[int(key)] = FrameEdit(
                weather=edit.get("weather"),
                fog=edit.get("fog"), wind=edit.get("wind"),
                rain=edit.get("rain"), snow=edit.get("snow"),
                nodes=edit.get("nodes", []),
            )
        return tl

    def validate(self, total_frames: int) -> None:
        bad = [k for k in self.frame_edits if not 0 <= k < total_frames]
        if bad:
            raise ValueError(f"timeline frame keys out of range [0, {total_frames}): {sorted(bad)}")


def _fog_from_dict(d: dict) -> FogParams:
    return FogParams(density=float(d.get("density", 0.2)),
                     color=tuple(d.get("color", (0.8, 0.8, 0.85))),
                     sky_depth=float(d.get("sky_depth", 500.0)))


def _wind_from_dict(d: dict) -> WindParams:
    return WindParams(magnitude=float(d.get("magnitude", 0.0)),
                      tilt=float(d.get("tilt", 0.0)),
                      azimuth=float(d.get("azimuth", 0.0)))


class TimelineRunner:
    """Applies a timeline to a scene graph frame by frame.

    Owns the particle systems (spawned lazily, respawned when their settings
    change) and mutates graph.weather_nodes in place before each render.
    """

    def __init__(self, graph: SceneGraph, timeline: WeatherTimeline):
        self.graph = graph
        self.timeline = timeline
        self.weather = timeline.weather
        self.fog = timeline.fog
        self.wind = timeline.wind
        self.rain_settings = timeline.rain
        self.snow_settings = timeline.snow
        self.systems: dict[str, ParticleSystem | None] = {RAIN: None, SNOW: None}
        self._default_volume: BoundingBox | None = None

    def default_volume(self) -> BoundingBox:
        if self._default_volume is None:
            positions = self.graph.background.gaussians.positions.detach()
            self._default_volume = particle_bounds(positions)
        return self._default_volume

    def apply_edit(self, edit: FrameEdit) -> None:
        if edit.weather:
            self.weather = edit.weather
        if edit.fog is not None:
            self.fog = _fog_from_dict(edit.fog)
        if edit.wind is not None:
            self.wind = _wind_from_dict(edit.wind)
            for ps in self.systems.values():
                if ps is not None:
                    ps.wind = self.wind
        if edit.rain is not None:
            self.rain_settings = ParticleSettings.from_dict(edit.rain)
            self.systems[RAIN] = None
        if edit.snow is not None:
            self.snow_settings = ParticleSettings.from_dict(edit.snow)
            self.systems[SNOW] = None
        for node_edit in edit.nodes:
            node_id = node_edit["id"]
            if "visible" in node_edit:
                self.graph.set_node_visibility(node_id, bool(node_edit["visible"]))
            if "pose" in node_edit:
                pose = node_edit["pose"]
                frame = int(node_edit.get("frame", 0))
                self.graph.set_node_pose(node_id, frame, pose["rotation"], pose["translation"])

    def _ensure_system(self, kind: str, settings: ParticleSettings) -> ParticleSystem | None:
        if not settings.enabled or (settings.count is not None and settings.count == 0):
            return None
        if self.systems[kind] is None:
            overrides = {}
            if settings.opacity is not None:
                overrides["base_opacity"] = settings.opacity
            self.systems[kind] = spawn(
                kind, settings.count, settings.volume or self.default_volume(),
                seed=settings.seed, fall_speed=settings.fall_speed,
                wind=self.wind, **overrides)
        return self.systems[kind]

    def advance(self, frame_index: int) -> None:
        """Apply this frame's edits and advance the particle simulation by dt."""
        edit = self.timeline.frame_edits.get(frame_index)
        if edit is not None:
            self.apply_edit(edit)
        self.graph.weather_nodes = []
        for kind, settings in ((RAIN, self.rain_settings), (SNOW, self.snow_settings)):
            ps = self._ensure_system(kind, settings)
            if ps is not None:
                ps.step(self.timeline.dt)
                self.graph.weather_nodes.append(ps)
