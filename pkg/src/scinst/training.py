"""Training loop, ablation switches, TOML configs and checkpoints."""
from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn

from .contrastive import DEFAULT_TAU, InstanceEmbedder, ProjectionHeads, icl_loss_from_codes
from .errors import CheckpointError, ConfigError, TrainingError
from .extractors import DEFAULT_VGG_SEED, LAYER_NAMES, PerceptualExtractor
from .generator import STYLE_ENCODERS, Generator, ModelConfig, grid_indices
from .imaging import list_images, load_image, random_crop
from .losses import (
    LossBundle,
    LossWeights,
    PatchDiscriminator,
    content_loss_from_features,
    discriminator_loss,
    generator_adversarial_loss,
    identity_loss_from_features,
    literal_identity_loss,
    style_loss_from_features,
    total_loss,
)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SCINST-CKPT\n"
CHECKPOINT_VERSION = 1
# datasets up to this many images (contents + styles) get cached reference features
REFERENCE_CACHE_LIMIT = 256


@dataclass
class TrainConfig:
    content_dir: str = ""
    style_dir: str = ""
    out_dir: str = "runs/default"
    n: int = 4  # grid size; contents and styles per step
    # full scale: images resized to 512 and cropped to 256
    image_size: int = 64
    crop_size: int = 64
    steps: int = 300
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    tau: float = DEFAULT_TAU
    seed: int = 0
    no_adv: bool = False
    no_icl: bool = False
    no_scin: bool = False
    style_encoder: str = "pe"
    residual: str = "query"
    literal_icl: bool = False
    literal_identity: bool = False
    # content and style self-pairs per step for the identity loss; 0 uses all n.
    # The batch is a fresh random draw each step, so a prefix is an unbiased subset.
    identity_pairs: int = 2
    # treat subnormal floats as zero during training; late-stage steps run ~10% faster on x86
    flush_denormal: bool = True
    vgg_weights: Optional[str] = None
    vgg_seed: int = DEFAULT_VGG_SEED
    checkpoint_every: int = 100
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.style_encoder not in STYLE_ENCODERS:
            raise ConfigError(f"style_encoder must be one of {STYLE_ENCODERS}, got {self.style_encoder!r}")
        if not self.no_icl and self.n < 2:
            raise ConfigError("n must be >= 2 while the contrastive loss is enabled")
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ConfigError("learning rates must be positive")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.crop_size > self.image_size:
            raise ConfigError(f"crop_size {self.crop_size} exceeds image_size {self.image_size}")
        if self.crop_size % 8:
            raise ConfigError(f"crop_size {self.crop_size} must be divisible by 8")
        if self.identity_pairs < 0:
            raise ConfigError("identity_pairs must be >= 0")
        if self.steps < 0 or self.checkpoint_every < 1:
            raise ConfigError("steps must be >= 0 and checkpoint_every >= 1")

    def model_config(self) -> ModelConfig:
        return ModelConfig(style_encoder=self.style_encoder, use_scin=not self.no_scin, residual=self.residual)

    def config_hash(self) -> str:
        """Digest of every field that shapes parameters or the frozen networks."""
        arch = dataclasses.asdict(self.model_config())
        arch.update(vgg_weights=self.vgg_weights, vgg_seed=self.vgg_seed)
        return hashlib.sha256(json.dumps(arch, sort_keys=True, default=str).encode()).hexdigest()[:16]

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)


def load_config(path) -> TrainConfig:
    """Parse a TOML file into a TrainConfig. Loss weights go in a [weights] table."""
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw, source=str(path))


def config_from_dict(raw: Dict, source: str = "config") -> TrainConfig:
    known = {f.name: f for f in dataclasses.fields(TrainConfig)}
    defaults = TrainConfig()
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"{source}: unknown field '{key}'")
        if key == "weights":
            if not isinstance(value, dict):
                raise ConfigError(f"{source}: field 'weights' must be a table")
            wnames = {f.name for f in dataclasses.fields(LossWeights)}
            for wk, wv in value.items():
                if wk not in wnames:
                    raise ConfigError(f"{source}: unknown field 'weights.{wk}'")
                if not isinstance(wv, (int, float)) or isinstance(wv, bool):
                    raise ConfigError(f"{source}: field 'weights.{wk}' must be a number")
            kwargs[key] = LossWeights(**{k: float(v) for k, v in value.items()})
            continue
        kwargs[key] = _coerce(key, value, getattr(defaults, key), source)
    try:
        return TrainConfig(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def _coerce(key, value, default, source):
    if key == "vgg_weights":
        if value is None or isinstance(value, str):
            return value or None
        raise ConfigError(f"{source}: field '{key}' must be a string path")
    expected = type(default)
    if expected is bool:
        ok = isinstance(value, bool)
    elif expected is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, expected) and not (expected is int and isinstance(value, bool))
    if not ok:
        raise ConfigError(f"{source}: field '{key}' must be {expected.__name__}, got {value!r}")
    return expected(value)


# -- state -----------------------------------------------------------------------

@dataclass
class TrainState:
    config: TrainConfig
    extractor: PerceptualExtractor
    generator: Generator
    discriminator: PatchDiscriminator
    embedder: InstanceEmbedder
    heads: ProjectionHeads
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    step: int = 0

    def generator_side_parameters(self) -> List[nn.Parameter]:
        params = [p for p in self.generator.parameters() if p.requires_grad]
        return params + list(self.heads.parameters())


def build_state(config: TrainConfig) -> TrainState:
    """Fresh networks and optimizers; everything is a function of ``config.seed``."""
    torch.manual_seed(config.seed)
    extractor = PerceptualExtractor(seed=config.vgg_seed, weights_path=config.vgg_weights)
    generator = Generator(extractor, config.model_config())
    discriminator = PatchDiscriminator()
    embedder = InstanceEmbedder()
    heads = ProjectionHeads()
    g_params = [p for p in generator.parameters() if p.requires_grad] + list(heads.parameters())
    opt_g = torch.optim.Adam(g_params, lr=config.lr_g)
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=config.lr_d)
    return TrainState(config, extractor, generator, discriminator, embedder, heads, opt_g, opt_d)


def _gather(features: Dict[str, torch.Tensor], index: torch.Tensor) -> Dict[str, torch.Tensor]:
    return {k: v.index_select(0, index) for k, v in features.items()}


def _zero():
    return torch.zeros(())


def train_step(state: TrainState, contents: torch.Tensor, styles: torch.Tensor,
               reference: Optional[Dict[str, torch.Tensor]] = None) -> LossBundle:
    """One discriminator update followed by one generator-side update.

    ``contents`` and ``styles`` are (n, 3, H, W). All 2n images are encoded
    once; the n x n grid and the self-stylizations for the identity loss
    (``identity_pairs`` per side) are decoded in a single batch. ``reference`` may hold precomputed
    extractor features of cat([contents, styles]) at every layer.
    """
    cfg, gen, ext, w = state.config, state.generator, state.extractor, state.config.weights
    n = contents.shape[0]
    if styles.shape[0] != n:
        raise ConfigError(f"need as many styles as contents ({styles.shape[0]} vs {n})")
    gen.train()
    both = torch.cat([contents, styles], dim=0)
    if reference is None:
        with torch.no_grad():
            reference = ext(both, LAYER_NAMES)
    ref = reference
    ref_c, ref_s = _split(ref, n)

    enc = gen.encode(both, content_features=ref["relu4_1"])
    style_index, content_index = grid_indices(n, n)
    k = min(cfg.identity_pairs or n, n)
    self_index = torch.cat([torch.arange(k), n + torch.arange(k)])
    identity = not cfg.literal_identity
    if identity:
        out = gen.render(enc, enc, torch.cat([content_index, self_index]), torch.cat([style_index + n, self_index]))
    else:
        out = gen.render(enc, enc, content_index, style_index + n)
    flat = out[:n * n]

    if cfg.no_adv:
        d_loss = _zero()
    else:
        d_loss = discriminator_loss(styles, flat, state.discriminator)
        if not math.isfinite(d_loss.item()):
            raise TrainingError(f"step {state.step}: loss component 'adversarial_d' is not finite")
        state.opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        state.opt_d.step()

    f_out = ext(out, LAYER_NAMES)
    f_cs, f_self = _split(f_out, n * n)
    l_content = content_loss_from_features(f_cs, _gather(ref_c, content_index))
    l_style = style_loss_from_features(f_cs, _gather(ref_s, style_index))
    if identity:
        f_cc, f_ss = _split(f_self, k)
        ref_ck, ref_sk = _split(ref_c, k)[0], _split(ref_s, k)[0]
        l_identity = identity_loss_from_features(out[n * n:n * n + k], contents[:k], out[n * n + k:], styles[:k],
                                                 f_cc, ref_ck, f_ss, ref_sk, w.identity_pixel, w.identity_feature)
    else:
        l_identity = literal_identity_loss(flat, contents.index_select(0, content_index),
                                           styles.index_select(0, style_index), ext,
                                           w.identity_pixel, w.identity_feature)

    if cfg.no_icl:
        l_contra = _zero()
    else:
        style_codes, content_codes = state.heads(state.embedder(flat))
        l_contra = icl_loss_from_codes(style_codes.view(n, n, -1), content_codes.view(n, n, -1),
                                       cfg.tau, literal=cfg.literal_icl)

    l_adv_g = _zero() if cfg.no_adv else generator_adversarial_loss(flat, state.discriminator)

    try:
        bundle = total_loss(l_content, l_style, l_identity, l_adv_g, d_loss.detach(), l_contra, w)
    except TrainingError as exc:
        raise TrainingError(f"step {state.step}: {exc}") from exc
    state.opt_g.zero_grad(set_to_none=True)
    bundle.total.backward()
    state.opt_g.step()
    state.step += 1
    return LossBundle(**{f.name: getattr(bundle, f.name).detach() for f in dataclasses.fields(bundle)})


def _split(features: Dict[str, torch.Tensor], k: int):
    return {n: v[:k] for n, v in features.items()}, {n: v[k:] for n, v in features.items()}


# -- data ------------------------------------------------------------------------

class ImageSet:
    """All images of a directory, resized once and kept in memory."""

    def __init__(self, directory, image_size: int):
        paths = list_images(directory)
        if not paths:
            raise ConfigError(f"dataset directory is empty: {directory}")
        self.paths = paths
        self.images = torch.cat([load_image(p, (image_size, image_size)) for p in paths], dim=0)

    def __len__(self):
        return len(self.paths)


def sample_indices(data: ImageSet, n: int, seed: int, step: int, stream: int):
    """(image indices, crop seeds) for one batch, a pure function of (seed, step, stream)."""
    gen = torch.Generator().manual_seed((seed * 1_000_003 + step) * 7 + stream)
    if len(data) >= n:
        idx = torch.randperm(len(data), generator=gen)[:n]
    else:
        idx = torch.randint(0, len(data), (n,), generator=gen)
    crop_seeds = torch.randint(0, 2**31 - 1, (n,), generator=gen)
    return idx, crop_seeds


def sample_batch(data: ImageSet, n: int, crop: int, seed: int, step: int, stream: int) -> torch.Tensor:
    """n cropped images chosen as a pure function of (seed, step, stream)."""
    idx, crop_seeds = sample_indices(data, n, seed, step, stream)
    return torch.cat([random_crop(data.images[i:i + 1], (crop, crop), int(s))
                      for i, s in zip(idx.tolist(), crop_seeds.tolist())], dim=0)


class ReferenceFeatures:
    """Frozen-extractor features of every whole image in a small dataset.

    When crops cover the full image the same inputs recur every epoch, so
    their reference features are computed once instead of every step.
    """

    def __init__(self, extractor: PerceptualExtractor, images: torch.Tensor):
        with torch.no_grad():
            chunks = [extractor(images[k:k + 8], LAYER_NAMES) for k in range(0, images.shape[0], 8)]
        self.features = {name: torch.cat([c[name] for c in chunks]) for name in LAYER_NAMES}

    def gather(self, index: torch.Tensor) -> Dict[str, torch.Tensor]:
        return _gather(self.features, index)


def _reference_caches(state: TrainState, contents: ImageSet, styles: ImageSet):
    cfg = state.config
    if cfg.crop_size != cfg.image_size or len(contents) + len(styles) > REFERENCE_CACHE_LIMIT:
        return None
    return ReferenceFeatures(state.extractor, contents.images), ReferenceFeatures(state.extractor, styles.images)


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(state: TrainState, path) -> None:
    """Single file: magic line, JSON header line, torch payload.

    The header records the payload length and SHA-256 so truncation or
    corruption is detected before deserializing.
    """
    buf = io.BytesIO()
    torch.save({
        "generator": state.generator.state_dict(),
        "discriminator": state.discriminator.state_dict(),
        "heads": state.heads.state_dict(),
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "step": state.step,
        "config": json.dumps(state.config.to_dict()),
    }, buf)
    payload = buf.getvalue()
    header = {
        "version": CHECKPOINT_VERSION,
        "config_hash": state.config.config_hash(),
        "step": state.step,
        "embedder": state.embedder.name,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)
    tmp.replace(path)


def read_checkpoint(path) -> Tuple[Dict, Dict]:
    """Validate and return (header, payload dict)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    data = path.read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    rest = data[len(CHECKPOINT_MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(rest[:nl])
    except ValueError as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    payload = rest[nl + 1:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header says {header['payload_bytes']}"
                              " (truncated?)")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    return header, torch.load(io.BytesIO(payload), map_location="cpu", weights_only=True)


def load_checkpoint(path, config: Optional[TrainConfig] = None) -> TrainState:
    """Rebuild a TrainState. With ``config`` given, its hash must match the file's."""
    header, payload = read_checkpoint(path)
    stored = config_from_dict(json.loads(payload["config"]), source=f"{path} (stored config)")
    if config is None:
        config = stored
    elif config.config_hash() != header["config_hash"]:
        raise CheckpointError(
            f"{path}: config hash {header['config_hash']} does not match current config {config.config_hash()}"
        )
    state = build_state(config)
    state.generator.load_state_dict(payload["generator"])
    state.discriminator.load_state_dict(payload["discriminator"])
    state.heads.load_state_dict(payload["heads"])
    state.opt_g.load_state_dict(payload["opt_g"])
    state.opt_d.load_state_dict(payload["opt_d"])
    state.step = int(payload["step"])
    return state


# -- driver ----------------------------------------------------------------------

def run_training(config: TrainConfig, resume: Optional[str] = None, max_steps: Optional[int] = None):
    """Train until ``config.steps`` (or ``max_steps`` more steps), logging one JSON line per step.

    Writes ``metrics.jsonl``, ``step_XXXXXX.ckpt`` every ``checkpoint_every``
    steps and ``latest.ckpt`` at the end, all under ``config.out_dir``.
    Returns (state, records of this call).
    """
    for d in (config.content_dir, config.style_dir):
        if not d or not Path(d).is_dir():
            raise FileNotFoundError(f"dataset directory does not exist: {d or '<unset>'}")
    contents = ImageSet(config.content_dir, config.image_size)
    styles = ImageSet(config.style_dir, config.image_size)
    state = load_checkpoint(resume, config) if resume else build_state(config)

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    end = config.steps if max_steps is None else min(config.steps, state.step + max_steps)
    records = []
    caches = _reference_caches(state, contents, styles)
    flushed = config.flush_denormal and torch.set_flush_denormal(True)
    try:
        with open(out / "metrics.jsonl", "a") as metrics:
            while state.step < end:
                step = state.step
                c = sample_batch(contents, config.n, config.crop_size, config.seed, step, 0)
                s = sample_batch(styles, config.n, config.crop_size, config.seed, step, 1)
                reference = None
                if caches is not None:
                    ci, _ = sample_indices(contents, config.n, config.seed, step, 0)
                    si, _ = sample_indices(styles, config.n, config.seed, step, 1)
                    ref_c, ref_s = caches[0].gather(ci), caches[1].gather(si)
                    reference = {k: torch.cat([ref_c[k], ref_s[k]]) for k in LAYER_NAMES}
                bundle = train_step(state, c, s, reference)
                record = {"step": step, **bundle.as_dict()}
                records.append(record)
                metrics.write(json.dumps(record) + "\n")
                metrics.flush()
                if state.step % config.checkpoint_every == 0:
                    save_checkpoint(state, out / f"step_{state.step:06d}.ckpt")
                if step % 10 == 0:
                    log.info("step %d total %.4f", step, record["total"])
    finally:
        if flushed:
            torch.set_flush_denormal(False)
    save_checkpoint(state, out / "latest.ckpt")
    return state, records
