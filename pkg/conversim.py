import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage

from audio_frontend import SAMPLE_RATE, VIDEO_FPS, Waveform
from utils import ConfigError, DataError, rng_for

log = logging.getLogger(__name__)

# --- 1. CONFIGURAÇÃO ---
FACE_SIZE_WIDTHS = {"small": (32, 63), "medium": (64, 128), "large": (129, 192)}
FACE_NOISE_STD = {"small": 0.08, "medium": 0.04, "large": 0.02}
CARRIER_BASE_HZ = 400.0
CARRIER_STEP_HZ = 350.0   # portadoras separadas por >= 300 Hz
N_CARRIERS = 18
SYLLABLE_RATE_HZ = (3.0, 6.0)
MOUTH_NOISE_FLOOR = 0.15  # abertura máxima da boca fora de fala
MOUTH_SPEAKING_MIN = 0.3
MOUTH_BAND = (0.60, 0.75)
PEAK_LEVEL = 0.5
RAMP_SAMPLES = 80         # 5 ms de rampa nas bordas dos turnos
HARD_OVERLAP_PROB = 0.4


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    num_people: int = 3
    S: int = 3
    T: int = 64
    fps: int = VIDEO_FPS
    overlap_prob: float = 0.1
    off_screen_prob: float = 0.0
    silence_prob: float = 0.2
    snr_db: tuple = (5.0, 20.0)
    face_sizes: tuple = None
    mean_turn_frames: float = 30.0
    crop: int = 32
    sample_rate: int = SAMPLE_RATE
    scene_id: str = ""

    def validate(self):
        if self.num_people < 1:
            raise ConfigError(f"num_people precisa ser >= 1, recebeu {self.num_people}")
        if self.T < 1 or self.S < 1:
            raise ConfigError(f"T e S precisam ser >= 1 (T={self.T}, S={self.S})")
        for name in ("overlap_prob", "off_screen_prob", "silence_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name}={p} fora de [0, 1]")
        if self.mean_turn_frames < 1.0:
            raise ConfigError(f"mean_turn_frames precisa ser >= 1, recebeu {self.mean_turn_frames}")
        if self.sample_rate % self.fps != 0:
            raise ConfigError(f"sample_rate {self.sample_rate} não é múltiplo de fps {self.fps}")
        if self.num_people > N_CARRIERS:
            raise ConfigError(f"no máximo {N_CARRIERS} pessoas por cena")
        if self.face_sizes is not None:
            if len(self.face_sizes) != self.num_people:
                raise ConfigError("face_sizes precisa de um tamanho por pessoa")
            bad = [f for f in self.face_sizes if f not in FACE_SIZE_WIDTHS]
            if bad:
                raise ConfigError(f"tamanhos de face desconhecidos: {bad}")
        return self

    @property
    def name(self):
        return self.scene_id or f"scene_{self.seed}"

    def to_dict(self):
        d = asdict(self)
        d["snr_db"] = list(self.snr_db)
        d["face_sizes"] = list(self.face_sizes) if self.face_sizes is not None else None
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["snr_db"] = tuple(d["snr_db"])
        if d.get("face_sizes") is not None:
            d["face_sizes"] = tuple(d["face_sizes"])
        return cls(**d)


@dataclass
class Scene:
    """
    Cena gerada por completo: todas as trilhas visíveis, rótulos de todas as pessoas,
    áudio misturado e metadados. tracks é float32 [E x T x H x W x 1].
    """
    scene_id: str
    spec: SceneSpec
    tracks: np.ndarray
    entity_ids: list
    person_ids: list
    labels: np.ndarray
    waveform: Waveform
    face_widths: list
    face_sizes: list
    carriers_hz: list
    mouth_open: np.ndarray = None
    overlap: np.ndarray = None
    on_screen: np.ndarray = None

    @property
    def T(self):
        return self.labels.shape[1]

    @property
    def visibility(self):
        """[P x T] bool; sem máscara salva, as entidades visíveis ficam em quadro o tempo todo."""
        if self.on_screen is not None:
            return np.asarray(self.on_screen, dtype=bool)
        mask = np.zeros(self.labels.shape, dtype=bool)
        mask[self.person_ids] = True
        return mask

    @property
    def faces_visible(self):
        """Faces em quadro por frame [T]."""
        return self.visibility.sum(axis=0).astype(np.int64)

    def entity_on_screen(self, entity_id):
        return self.visibility[self.person_ids[self.entity_index(entity_id)]]

    def entity_index(self, entity_id):
        try:
            return self.entity_ids.index(entity_id)
        except ValueError:
            raise DataError(f"entidade {entity_id} não está visível em {self.scene_id}") from None

    def entity_labels(self, entity_id):
        return self.labels[self.person_ids[self.entity_index(entity_id)]]


@dataclass
class SceneSample:
    scene_id: str
    V: np.ndarray
    waveform: Waveform
    R: np.ndarray
    context_labels: np.ndarray
    entity_ids: list
    meta: dict = field(default_factory=dict)

    @property
    def T(self):
        return self.R.shape[0]

    def window(self, start, length):
        """Recorte temporal [start, start+length) de vídeo, áudio e rótulos."""
        if start < 0 or length < 1 or start + length > self.T:
            raise DataError(f"janela [{start}, {start + length}) fora de [0, {self.T})")
        spf = self.waveform.sample_rate // VIDEO_FPS
        wave = Waveform(self.waveform.samples[start * spf:(start + length) * spf], self.waveform.sample_rate)
        meta = dict(self.meta)
        meta["faces_visible"] = np.asarray(self.meta["faces_visible"])[start:start + length]
        meta["frame_offset"] = self.meta.get("frame_offset", 0) + start
        return replace(self, V=self.V[:, start:start + length], waveform=wave,
                       R=self.R[start:start + length],
                       context_labels=self.context_labels[:, start:start + length], meta=meta)

# ==========================================
# 1. TURNOS (CADEIA DE MARKOV)
# ==========================================

def transition_matrix(spec):
    """
    Estados 0..P-1 = pessoa falando, P = silêncio.
    Permanência geométrica com média mean_turn_frames; ao sair, silêncio com silence_prob,
    senão outra pessoa uniforme. Do silêncio, sai para qualquer pessoa.
    """
    P = spec.num_people
    stay = 1.0 - 1.0 / spec.mean_turn_frames
    leave = 1.0 - stay
    M = np.zeros((P + 1, P + 1))
    for p in range(P):
        M[p, p] = stay
        M[p, P] = leave * spec.silence_prob
        if P > 1:
            for q in range(P):
                if q != p:
                    M[p, q] = leave * (1.0 - spec.silence_prob) / (P - 1)
        else:
            M[p, p] += leave * (1.0 - spec.silence_prob)
    M[P, P] = stay
    M[P, :P] = leave / P
    return M


def stationary_distribution(M):
    n = M.shape[0]
    A = np.vstack([M.T - np.eye(n), np.ones((1, n))])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(A, b, rcond=None)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def stationary_speaking_fraction(spec):
    """Fração estacionária de frames com alguém falando (sem contar sobreposição)."""
    return float(1.0 - stationary_distribution(transition_matrix(spec))[-1])


def simulate_turns(spec, rng):
    M = transition_matrix(spec)
    pi = stationary_distribution(M)
    states = np.empty(spec.T, dtype=np.int64)
    states[0] = rng.choice(len(pi), p=pi)
    for t in range(1, spec.T):
        states[t] = rng.choice(len(pi), p=M[states[t - 1]])
    return states


def _runs(states, value):
    """Intervalos [a, b) contíguos onde states == value."""
    mask = np.concatenate([[False], states == value, [False]])
    edges = np.flatnonzero(np.diff(mask.astype(np.int8)))
    return list(zip(edges[::2], edges[1::2]))


def turn_labels(spec, rng):
    P, T = spec.num_people, spec.T
    states = simulate_turns(spec, rng)
    labels = np.zeros((P, T), dtype=np.int64)
    for p in range(P):
        labels[p, states == p] = 1
    overlap = np.zeros(T, dtype=bool)
    if P > 1 and spec.overlap_prob > 0:
        for p in range(P):
            for a, b in _runs(states, p):
                if rng.random() >= spec.overlap_prob:
                    continue
                others = [q for q in range(P) if q != p]
                q = others[rng.integers(len(others))]
                n = b - a
                start = a + int(rng.integers(0, n // 2 + 1))
                stop = min(b, start + max(1, n // 2))
                labels[q, start:stop] = 1
                overlap[start:stop] = True
    return labels, overlap


def off_screen_mask(labels, visible, prob, rng):
    """
    [P x T] bool de quem está em quadro. Pessoas fora de visible nunca aparecem;
    cada turno de fala de uma pessoa visível sai de quadro com probabilidade prob.
    """
    mask = np.zeros(labels.shape, dtype=bool)
    mask[visible] = True
    if prob <= 0:
        return mask
    for p in visible:
        for a, b in _runs(labels[p], 1):
            if rng.random() < prob:
                mask[p, a:b] = False
    return mask

# ==========================================
# 2. ÁUDIO
# ==========================================

def syllabic_envelope(t, rate, phase):
    return 0.5 * (1.0 + np.sin(2.0 * np.pi * rate * t + phase))


def render_audio(spec, labels, carriers, rates, phases, rng):
    spf = spec.sample_rate // spec.fps
    n = spec.T * spf
    t = np.arange(n) / spec.sample_rate
    ramp = np.ones(RAMP_SAMPLES) / RAMP_SAMPLES
    mix = np.zeros(n)
    for p in range(spec.num_people):
        gate = np.convolve(np.repeat(labels[p].astype(np.float64), spf), ramp, mode="same")
        amp = gate * (0.2 + 0.8 * syllabic_envelope(t, rates[p], phases[p]))
        mix += amp * np.sin(2.0 * np.pi * carriers[p] * t + rng.uniform(0, 2 * np.pi))
    lo, hi = spec.snr_db
    snr = rng.uniform(lo, hi) if hi > lo else lo
    power = float(np.mean(mix ** 2))
    if power <= 0:
        power = 0.125
    noise = rng.normal(0.0, np.sqrt(power / 10.0 ** (snr / 10.0)), size=n)
    x = mix + noise
    peak = np.abs(x).max()
    if peak > 0:
        x = x * (PEAK_LEVEL / peak)
    return Waveform(x, spec.sample_rate)

# ==========================================
# 3. FACES
# ==========================================

def resize_image(frames, size):
    """[T x h x w] -> [T x size x size] com interpolação bilinear."""
    h, w = frames.shape[1:]
    out = ndimage.zoom(frames, (1.0, size / h, size / w), order=1, mode="nearest")
    out = out[:, :size, :size]
    if out.shape[1:] != (size, size):
        out = np.pad(out, [(0, 0), (0, size - out.shape[1]), (0, size - out.shape[2])], mode="edge")
    return out


def identity_texture(width, rng):
    coarse = rng.uniform(0.3, 0.7, size=(6, 6))
    tex = ndimage.zoom(coarse, width / 6.0, order=1)[:width, :width]
    tex = np.pad(tex, [(0, width - tex.shape[0]), (0, width - tex.shape[1])], mode="edge")
    yy, xx = np.mgrid[0:width, 0:width] / max(width - 1, 1)
    inside = ((xx - 0.5) / 0.45) ** 2 + ((yy - 0.5) / 0.5) ** 2 <= 1.0
    return np.where(inside, tex, 0.1)


def mouth_openness(labels_p, rate, phase, fps, rng):
    t = np.arange(labels_p.size) / fps
    speaking = MOUTH_SPEAKING_MIN + (1.0 - MOUTH_SPEAKING_MIN) * syllabic_envelope(t, rate, phase)
    silent = MOUTH_NOISE_FLOOR * rng.uniform(0.0, 1.0, size=labels_p.size)
    return np.where(labels_p == 1, speaking, silent)


def render_face(width, openness, crop, size_class, rng):
    """Trilha [T x crop x crop] com textura de identidade, faixa da boca e jitter de ±1 px."""
    T = openness.size
    tex = identity_texture(width, rng)
    r0, r1 = int(MOUTH_BAND[0] * width), max(int(MOUTH_BAND[1] * width), int(MOUTH_BAND[0] * width) + 1)
    c0, c1 = int(0.3 * width), max(int(0.7 * width), int(0.3 * width) + 1)
    frames = np.repeat(tex[None], T, axis=0)
    frames[:, r0:r1, c0:c1] *= (1.0 - 0.9 * openness)[:, None, None]
    shifts = rng.integers(-1, 2, size=(T, 2))
    for i in range(T):
        frames[i] = np.roll(frames[i], tuple(shifts[i]), axis=(0, 1))
    out = resize_image(frames, crop)
    out = out + rng.normal(0.0, FACE_NOISE_STD[size_class], size=out.shape)
    return np.clip(out, 0.0, 1.0)

# ==========================================
# 4. CENA COMPLETA
# ==========================================

def generate_scene(spec):
    """Função pura de spec (incluindo a seed): mesma spec -> cena bit a bit idêntica."""
    spec.validate()
    P = spec.num_people
    rng = rng_for(spec.seed, "scene")
    labels, overlap = turn_labels(spec, rng_for(spec.seed, "turns"))

    carriers = [CARRIER_BASE_HZ + CARRIER_STEP_HZ * j for j in rng.permutation(N_CARRIERS)[:P]]
    rates = rng.uniform(*SYLLABLE_RATE_HZ, size=P)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=P)
    sizes = list(spec.face_sizes) if spec.face_sizes is not None else \
        [list(FACE_SIZE_WIDTHS)[i] for i in rng.integers(0, 3, size=P)]
    widths = [int(rng.integers(FACE_SIZE_WIDTHS[s][0], FACE_SIZE_WIDTHS[s][1] + 1)) for s in sizes]

    visible = [p for p in range(P) if rng.random() >= spec.off_screen_prob]
    if not visible:
        visible = [int(rng.integers(P))]
    on_screen = off_screen_mask(labels, visible, spec.off_screen_prob, rng_for(spec.seed, "off_screen"))

    waveform = render_audio(spec, labels, carriers, rates, phases, rng_for(spec.seed, "audio"))
    mouth = np.stack([mouth_openness(labels[p], rates[p], phases[p], spec.fps, rng_for(spec.seed, "mouth", p))
                      for p in range(P)])
    tracks = np.stack([
        render_face(widths[p], mouth[p], spec.crop, sizes[p], rng_for(spec.seed, "face", p))
        for p in visible
    ]).astype(np.float32)[..., None]
    tracks[~on_screen[visible]] = 0.0

    name = spec.name
    scene = Scene(
        scene_id=name, spec=spec, tracks=tracks,
        entity_ids=[f"{name}:p{p}" for p in visible], person_ids=visible,
        labels=labels, waveform=waveform,
        face_widths=[widths[p] for p in visible], face_sizes=sizes,
        carriers_hz=[float(c) for c in carriers], mouth_open=mouth, overlap=overlap,
        on_screen=on_screen,
    )
    log.debug("cena %s: %d pessoas, %d visíveis", name, P, len(visible))
    return scene

# ==========================================
# 5. CONTEXTO E AUMENTAÇÃO
# ==========================================

def sample_context(scene, target_id, S, seed=0):
    """
    Alvo no índice 0 e S-1 contextos sorteados sem reposição entre os demais.
    Com menos de S-1 outros, os existentes são repetidos ciclicamente;
    sem nenhum outro, o próprio alvo preenche os slots.
    """
    t_idx = scene.entity_index(target_id)
    others = [i for i in range(len(scene.entity_ids)) if i != t_idx]
    rng = rng_for(seed, scene.scene_id, target_id, "context")
    if len(others) >= S - 1:
        chosen = [int(i) for i in rng.choice(others, size=S - 1, replace=False)] if S > 1 else []
    else:
        pool = [int(i) for i in rng.permutation(others)] if others else [t_idx]
        chosen = [pool[i % len(pool)] for i in range(S - 1)]
    slots = [t_idx] + chosen
    persons = [scene.person_ids[i] for i in slots]
    meta = {
        "face_widths": [scene.face_widths[i] for i in slots],
        "faces_visible": scene.faces_visible,
        "frame_offset": 0,
    }
    context = scene.labels[persons[1:]] if S > 1 else np.zeros((0, scene.T), dtype=np.int64)
    return SceneSample(
        scene_id=scene.scene_id, V=scene.tracks[slots], waveform=scene.waveform,
        R=scene.labels[persons[0]].copy(), context_labels=context,
        entity_ids=[scene.entity_ids[i] for i in slots], meta=meta,
    )


def hflip(track):
    """Espelha horizontalmente [T x H x W x 1]."""
    return track[:, :, ::-1]


def augment_track(track, rng, scale=(0.8, 1.0), max_angle=15.0):
    """Mesmo corte/flip/rotação em todos os frames da trilha."""
    T, H, W, _ = track.shape
    frames = np.asarray(track[..., 0], dtype=np.float64)
    side = max(1, int(round(np.sqrt(rng.uniform(*scale)) * H)))
    y0 = int(rng.integers(0, H - side + 1))
    x0 = int(rng.integers(0, W - side + 1))
    flip = rng.random() < 0.5
    angle = rng.uniform(-max_angle, max_angle)
    out = resize_image(frames[:, y0:y0 + side, x0:x0 + side], H)
    if flip:
        out = out[:, :, ::-1]
    out = ndimage.rotate(out, angle, axes=(1, 2), reshape=False, order=1, mode="nearest")
    return out[..., None].astype(track.dtype)


def mix_audio(waveform, other, rng, gain=(0.1, 0.5)):
    """x + g·y com g ~ U(gain), sem ajuste de fase; saída limitada a [-1, 1]."""
    x = waveform.samples
    y = np.resize(other.samples, x.size) if other.samples.size else np.zeros_like(x)
    return Waveform(np.clip(x + rng.uniform(*gain) * y, -1.0, 1.0), waveform.sample_rate)


def augment(sample, train_audio_pool, seed, visual=True, audio=True):
    """
    train_audio_pool: lista de (scene_id, Waveform) do conjunto de treino.
    Sem aumentação habilitada devolve a própria amostra.
    """
    if not visual and not audio:
        return sample
    rng = rng_for(seed, sample.scene_id, sample.entity_ids[0], "augment")
    V, wave = sample.V, sample.waveform
    if visual:
        V = np.stack([augment_track(V[i], rng_for(seed, sample.scene_id, sample.entity_ids[0], "aug", i))
                      for i in range(V.shape[0])])
    if audio:
        pool = [w for sid, w in train_audio_pool if sid != sample.scene_id]
        if pool:
            wave = mix_audio(wave, pool[int(rng.integers(len(pool)))], rng)
    return replace(sample, V=V, waveform=wave)

# ==========================================
# 6. SPECS A PARTIR DA CONFIG
# ==========================================

def hard_split_spec(seed, num_people=3, S=3, T=64, crop=32, overlap_prob=HARD_OVERLAP_PROB, **kwargs):
    """Subconjunto difícil: muita sobreposição e faces pequenas."""
    return SceneSpec(seed=seed, num_people=num_people, S=S, T=T, crop=crop,
                     overlap_prob=max(overlap_prob, 0.3), face_sizes=("small",) * num_people, **kwargs)


def spec_from_config(cfg, index, split="train", hard=False):
    rng = rng_for(cfg.seed, "spec", split, index)
    P = int(rng.integers(cfg.num_people_min, cfg.num_people_max + 1))
    seed = int(rng.integers(0, 2 ** 31 - 1))
    common = dict(S=cfg.S, T=cfg.scene_frames, crop=cfg.crop, silence_prob=cfg.silence_prob,
                  off_screen_prob=cfg.off_screen_prob, snr_db=(cfg.snr_db_min, cfg.snr_db_max),
                  mean_turn_frames=cfg.mean_turn_frames, scene_id=f"{split}_{index:05d}")
    if hard:
        return hard_split_spec(seed, num_people=P, overlap_prob=max(cfg.overlap_prob, HARD_OVERLAP_PROB), **common)
    return SceneSpec(seed=seed, num_people=P, overlap_prob=cfg.overlap_prob, **common)
