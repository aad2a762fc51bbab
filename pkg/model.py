import logging
import threading
from pathlib import Path

import numpy as np

import tensor_core as tc
from audio_frontend import log_mel_for_video
from config import config_from_dict, config_to_dict, lscm_config
from encoders import VGGFrame, VisualEncoder, broadcast_audio, stack
from layers import Module
from lscm import LSCM
from utils import CheckpointError, VersionError, dump_json, load_json, rng_for

log = logging.getLogger(__name__)


def standardize(A):
    """Normalização por enunciado (média 0, desvio 1) do log-mel."""
    A = np.asarray(A, dtype=np.float64)
    return (A - A.mean()) / (A.std() + 1e-5)


class FeatureCache:
    """Embeddings visuais por (scene_id, entity_id, frame_start, frame_stop)."""

    def __init__(self):
        self._store = {}
        self.hits = 0
        self.misses = 0

    def __contains__(self, key):
        return key in self._store

    def get(self, key):
        value = self._store.get(key)
        if value is None:
            self.misses += 1
        else:
            self.hits += 1
        return value

    def put(self, key, value):
        self._store[key] = value

    def __len__(self):
        return len(self._store)


class LoCoNetModel(Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        rng = rng_for(cfg.seed, "init")
        self.visual = self.child("visual", VisualEncoder(cfg.C, rng, widths=tuple(cfg.visual_widths),
                                                         crop=cfg.crop, tcn_blocks=cfg.tcn_blocks))
        self.audio = self.child("audio", VGGFrame(cfg.mel_bins, cfg.C, rng, widths=tuple(cfg.audio_widths)))
        self.lscm = self.child("lscm", LSCM(lscm_config(cfg), rng))
        self.encoder_calls = 0
        self._lock = threading.Lock()

    # ==========================================
    # 1. CODIFICAÇÃO
    # ==========================================

    def encode_tracks(self, V, entity_ids, cache=None, key_prefix=None):
        """
        Trilhas [S x T x H x W x 1] -> f_v [S x T x C].
        O mesmo entity_id em vários slots é codificado uma vez; com cache,
        também entre amostras diferentes.
        """
        local = {}
        per = []
        for i, eid in enumerate(entity_ids):
            if eid in local:
                per.append(local[eid])
                continue
            key = (*key_prefix, eid) if key_prefix is not None else None
            emb = cache.get(key) if cache is not None and key in cache else None
            if emb is None:
                emb = self.visual.encode_visual(V[i])
                with self._lock:
                    self.encoder_calls += 1
                if cache is not None:
                    cache.put(key, emb)
            local[eid] = emb
            per.append(emb)
        return stack(per)

    def audio_input(self, waveform, T):
        return standardize(log_mel_for_video(waveform, T, mel_bins=self.cfg.mel_bins))

    def forward_sample(self, sample, cache=None):
        """SceneSample -> (ContextState, lista de logits [T x 2] por bloco)."""
        T = sample.T
        offset = sample.meta.get("frame_offset", 0)
        f_v = self.encode_tracks(sample.V, sample.entity_ids, cache, key_prefix=(sample.scene_id, offset, offset + T))
        f_a = broadcast_audio(self.audio(self.audio_input(sample.waveform, T)), len(sample.entity_ids))
        return self.lscm(f_v, f_a)

    __call__ = forward_sample

    def predict_scores(self, sample, cache=None):
        """Score por frame = l1 - l0 do último bloco (> 0 => falando)."""
        _, logits = self.forward_sample(sample, cache)
        final = logits[-1].data
        return final[:, 1] - final[:, 0], final

    # ==========================================
    # 2. CHECKPOINT + SIDECAR DE CONFIG
    # ==========================================

    def save(self, path):
        path = Path(path)
        tc.save_checkpoint(path, self.named_parameters())
        dump_json(sidecar_path(path), config_to_dict(self.cfg))
        return path


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_model(path, cfg=None):
    """
    Reconstrói a arquitetura pela config do sidecar (ou cfg, se não houver sidecar)
    e carrega os pesos. Formas divergentes -> VersionError.
    """
    path = Path(path)
    side = sidecar_path(path)
    if side.exists():
        saved = config_from_dict(load_json(side))
        if cfg is not None:
            keys = ("N", "S", "C", "heads", "k", "s", "sim_kind", "mlp_ratio", "use_lim", "use_sim",
                    "crop", "mel_bins", "visual_widths", "audio_widths", "tcn_blocks")
            diff = [k for k in keys if tuple(np.atleast_1d(cfg[k])) != tuple(np.atleast_1d(saved[k]))]
            if diff:
                raise VersionError(f"config difere do checkpoint {path} em {diff}")
        cfg = saved
    elif cfg is None:
        raise CheckpointError(f"{path}: sidecar {side.name} ausente e nenhuma config informada")
    model = LoCoNetModel(cfg)
    model.load_state(tc.load_checkpoint(path))
    log.info("Checkpoint carregado de %s", path)
    return model
