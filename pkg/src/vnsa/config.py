"""``key = value`` run configuration."""
from __future__ import annotations

from dataclasses import dataclass, replace

from .branches import SparseConfig
from .dense import HeadLayout
from .errors import ConfigError
from .gating import ModalitySpans

# key -> (attribute, type)
_KEYS = {
    "heads": ("h", int),
    "kv_heads": ("g", int),
    "head_dim": ("d_k", int),
    "block_size": ("s", int),
    "select_blocks": ("n", int),
    "window": ("w", int),
    "seq_len": ("L", int),
    "tokens_per_frame": ("T", int),
    "frames": ("F", int),
    "seed": ("seed", int),
    "vision_spans": ("vision_spans", str),
    "layers": ("layers", int),
    "bench_head_dim": ("bench_head_dim", int),
    "fixtures": ("fixtures", str),
    "out": ("out", str),
}


@dataclass(frozen=True)
class RunConfig:
    h: int = 28
    g: int = 4
    d_k: int = 128
    s: int = 64
    n: int = 32
    w: int = 256
    L: int = 256
    T: int | None = None
    F: int | None = None
    seed: int = 0
    vision_spans: str = "all"   # "all", "none" or "a-b, c-d, ..."
    layers: int = 1
    bench_head_dim: int = 4
    fixtures: str = "vnsa_fixtures"
    out: str = "vnsa_out"

    @property
    def layout(self) -> HeadLayout:
        return HeadLayout(self.h, self.g, self.d_k)

    @property
    def sparse(self) -> SparseConfig:
        return SparseConfig(self.s, self.n, self.w)

    @property
    def width(self) -> int:
        return self.h * self.d_k

    def spans(self) -> ModalitySpans:
        text = self.vision_spans.strip().lower()
        if text == "all":
            return ModalitySpans.from_vision(self.L, [(1, self.L)])
        if text in ("none", ""):
            return ModalitySpans.from_vision(self.L, [])
        ranges = []
        for part in text.split(","):
            a, sep, b = part.strip().partition("-")
            if not sep:
                raise ConfigError(f"vision span {part.strip()!r} is not of the form start-end")
            ranges.append((int(a), int(b)))
        return ModalitySpans.from_vision(self.L, ranges)

    def validate(self) -> "RunConfig":
        for name in ("h", "g", "d_k", "s", "L", "layers", "bench_head_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{_key_of(name)} must be >= 1, got {getattr(self, name)}")
        for name in ("n", "w"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{_key_of(name)} must be >= 0, got {getattr(self, name)}")
        if self.g > self.h or self.h % self.g:
            raise ConfigError(f"heads = {self.h} is not divisible by kv_heads = {self.g}")
        if (self.T is None) != (self.F is None):
            raise ConfigError("tokens_per_frame and frames must be given together")
        if self.T is not None and self.T * self.F != self.L:
            raise ConfigError(f"seq_len = {self.L} but tokens_per_frame * frames = {self.T * self.F}")
        try:
            self.spans()
        except ValueError as exc:
            raise ConfigError(f"vision_spans: {exc}") from exc
        return self


def _key_of(attr: str) -> str:
    return next(k for k, (a, _) in _KEYS.items() if a == attr)


def parse_config(text: str) -> RunConfig:
    """Parse ``key = value`` lines ('#' starts a comment) into a validated RunConfig."""
    values: dict = {}
    where: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        attr, typ = _KEYS[key]
        try:
            values[attr] = typ(value)
        except ValueError:
            raise ConfigError(f"line {lineno}: key {key!r}: malformed value {value!r}") from None
        where[attr] = (lineno, key)
    if "T" in values and "F" in values and "L" not in values:
        values["L"] = values["T"] * values["F"]
    cfg = RunConfig(**values)
    try:
        return cfg.validate()
    except ConfigError as exc:
        # name the first offending line when one can be pinned down
        msg = str(exc)
        for attr, (lineno, key) in sorted(where.items(), key=lambda kv: kv[1][0]):
            if key in msg:
                raise ConfigError(f"line {lineno}: key {key!r}: {msg}") from None
        raise


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    kw = {k: v for k, v in kw.items() if v is not None}
    return replace(cfg, **kw).validate() if kw else cfg


CONFIG_KEYS = tuple(_KEYS)
