"""Full network assembly: encoder, optional deformable fusion, decoder, head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import Decoder, Encoder, PyramidSpec
from .errors import SpecError
from .fsad import FsadTransformer, SamplingSpec
from .heads import HeadOutput, build_head
from .layers import Layer
from .multiscale import MultiScaleHead, StagePrediction, assemble_semantic
from .tensor import Tensor


@dataclass
class SampleForward:
    """One sample's head output: multi-stage for the decoupled head,
    single coupled output otherwise."""

    stages: list[StagePrediction] | None = None  # coarse -> fine
    coupled: HeadOutput | None = None

    def stages_fine_first(self) -> list:
        return [p.output for p in reversed(self.stages)]


class SegmentationModel(Layer):
    def __init__(self, rng: np.random.Generator, cfg, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.variant = cfg["head.variant"]
        self.num_classes = cfg["data.classes"]  # K foreground classes
        self.loss_stages = cfg["loss.stages"]
        spec = PyramidSpec(num_stages=cfg["model.stages"],
                           base_channels=cfg["model.base_channels"],
                           max_channels=cfg["model.max_channels"],
                           in_channels=cfg["model.in_channels"])
        self.pyramid_spec = spec
        extent = cfg["data.volume"]
        self.level_extents = [(extent // 2 ** s,) * 3 for s in range(spec.num_stages)]

        self.encoder = self.child("encoder", Encoder(rng, spec, dtype=dtype))
        self.fsad = None
        if cfg["fsad.enabled"]:
            fspec = SamplingSpec(points_k=cfg["fsad.points_k"],
                                 query_levels=cfg["fsad.query_levels"],
                                 heads=cfg["fsad.heads"])
            self.fsad = self.child("fsad", FsadTransformer(
                rng, spec.channel_list, self.level_extents, fspec,
                embed_dim=cfg["model.embed_dim"], dtype=dtype))
        self.decoder = self.child("decoder", Decoder(rng, spec, dtype=dtype))

        n_q = cfg["head.num_queries"]
        if self.variant == "decoupled":
            # the supervised stages are the loss_stages finest decoder maps
            stage_channels = [spec.channels(s)
                              for s in range(self.loss_stages - 1, -1, -1)]
            self.head = self.child("head", MultiScaleHead(
                rng, stage_channels, n_cls=self.num_classes,
                n_queries=(n_q or None), embed_dim=cfg["model.embed_dim"],
                n_heads=cfg["model.attn_heads"],
                shared_queries=cfg["head.shared_queries"],
                masked_attention=cfg["head.masked_attention"], dtype=dtype))
        else:
            # coupled variants predict background as semantic channel 0
            n_cls = self.num_classes + 1
            self.head = self.child("head", build_head(
                self.variant, rng, in_channels=spec.channels(0), n_cls=n_cls,
                n_queries=(n_q or None), embed_dim=cfg["model.embed_dim"],
                n_heads=cfg["model.attn_heads"], dtype=dtype))

    # -- forward ------------------------------------------------------------
    def forward(self, volume: Tensor) -> list[SampleForward]:
        pyramid = self.encoder.forward(volume)
        if self.fsad is not None:
            pyramid = self.fsad.forward(pyramid)
        decoder_maps = self.decoder.forward(pyramid)  # coarse -> fine
        b_n = volume.shape[0]
        outs = []
        for b in range(b_n):
            if self.variant == "decoupled":
                maps = [self._sample_map(m, b)
                        for m in decoder_maps[-self.loss_stages:]]
                outs.append(SampleForward(stages=self.head.forward(maps)))
            else:
                feat = self._sample_map(decoder_maps[-1], b)
                outs.append(SampleForward(coupled=self.head.forward(feat)))
        return outs

    @staticmethod
    def _sample_map(batched: Tensor, b: int) -> Tensor:
        return T.reshape(T.slice_axis(batched, 0, b, b + 1), batched.shape[1:])

    # -- inference ------------------------------------------------------------
    def infer_labels(self, volume_np: np.ndarray) -> np.ndarray:
        """(1, D, H, W) intensity -> (D, H, W) int labels in 0..K."""
        with T.no_grad():
            out = self.forward(Tensor(volume_np[None].astype(np.float32)))[0]
            if self.variant == "decoupled":
                finest = out.stages[-1].output
                probs = _softmax_rows(finest.class_logits.data.astype(np.float64))
                masks = _sigmoid(finest.mask_logits.data.astype(np.float64))
                labels = assemble_semantic(probs, masks.reshape(masks.shape[0], -1))
                return labels.reshape(finest.mask_logits.shape[1:])
            sem = out.coupled.semantic_probs.data
            return sem.argmax(axis=0).astype(np.int64)

    # -- persistence ----------------------------------------------------------
    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: info.tensor.data.copy()
                for name, info in self.named_parameters()}

    def load_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        named = dict(self.named_parameters())
        missing = set(named) - set(arrays)
        extra = set(arrays) - set(named)
        if missing or extra:
            raise SpecError(f"checkpoint/model mismatch: missing {sorted(missing)[:3]}, "
                            f"unexpected {sorted(extra)[:3]}")
        for name, info in named.items():
            if arrays[name].shape != info.tensor.shape:
                raise SpecError(f"parameter {name!r} shape mismatch")
            info.tensor.data = arrays[name].astype(info.tensor.dtype).copy()


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def build_model(cfg, seed: int | None = None) -> SegmentationModel:
    rng = np.random.default_rng(cfg["train.seed"] if seed is None else seed)
    return SegmentationModel(rng, cfg)


def model_from_checkpoint(data) -> SegmentationModel:
    from .config import Config
    cfg = Config.from_text(data.config_text)
    model = build_model(cfg)
    model.load_param_arrays(data.params)
    return model
