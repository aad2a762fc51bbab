import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window

from utils import AlignmentError, ConfigError, DataError

# --- 1. CONFIGURAÇÃO (convenção da família VGGish) ---
SAMPLE_RATE = 16000
WIN_LEN = 400       # 25 ms
HOP_LEN = 160       # 10 ms
FFT_SIZE = 512
MEL_BINS = 40
F_MIN = 0.0
F_MAX = 8000.0
LOG_FLOOR = 1e-8
VIDEO_FPS = 25
AUDIO_FRAMES_PER_VIDEO_FRAME = 4
MAX_ALIGN_DEFICIT = 2


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise DataError(f"sample_rate inválido: {self.sample_rate}")
        if self.samples.ndim != 1:
            raise DataError(f"áudio precisa ser mono 1-D, recebeu forma {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("áudio contém amostras não finitas")

    @property
    def duration(self):
        return self.samples.size / self.sample_rate

    def rms(self):
        return float(np.sqrt(np.mean(self.samples ** 2))) if self.samples.size else 0.0


@dataclass
class MelSpectrogram:
    frames: np.ndarray
    hop: float = HOP_LEN / SAMPLE_RATE
    mel_bins: int = MEL_BINS

# ==========================================
# 1. WAV (PCM16 MONO)
# ==========================================

def read_wav(path):
    """Lê WAV PCM16 mono a 16 kHz (outras taxas são recusadas; não há reamostragem)."""
    try:
        rate, data = wavfile.read(str(path))
    except (OSError, ValueError) as e:
        raise DataError(f"Falha ao ler WAV {path}: {e}") from e
    if rate != SAMPLE_RATE:
        raise DataError(f"{path}: taxa {rate} Hz não suportada (somente {SAMPLE_RATE} Hz)")
    if data.ndim != 1:
        raise DataError(f"{path}: somente áudio mono é aceito")
    if data.dtype != np.int16:
        raise DataError(f"{path}: somente PCM16 é aceito (recebeu {data.dtype})")
    return Waveform(data.astype(np.float64) / 32768.0, rate)


def write_wav(path, waveform):
    pcm = np.clip(np.round(waveform.samples * 32767.0), -32768, 32767).astype(np.int16)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        wavfile.write(str(path), waveform.sample_rate, pcm)
    except OSError as e:
        raise DataError(f"Falha ao gravar WAV {path}: {e}") from e
    return Path(path)

# ==========================================
# 2. STFT E MEL
# ==========================================

def stft_magnitude(w, win_len=WIN_LEN, hop_len=HOP_LEN, fft_size=FFT_SIZE):
    """
    Magnitudes |STFT| com janela Hann e padding por reflexão.
    Número de frames = ceil(len / hop); bins = fft_size/2 + 1.
    """
    if win_len > fft_size:
        raise ConfigError(f"win_len={win_len} maior que fft_size={fft_size}")
    if hop_len <= 0:
        raise ConfigError(f"hop_len precisa ser > 0, recebeu {hop_len}")
    x = w.samples
    n = x.size
    if n == 0:
        raise DataError("waveform vazio")
    n_frames = math.ceil(n / hop_len)
    left = win_len // 2
    right = max(0, (n_frames - 1) * hop_len + win_len - n - left)
    mode = "reflect" if n > 1 else "edge"
    padded = np.pad(x, (left, right), mode=mode)
    frames = np.lib.stride_tricks.sliding_window_view(padded, win_len)[::hop_len][:n_frames]
    window = get_window("hann", win_len, fftbins=True)
    spec = np.fft.rfft(frames * window, n=fft_size, axis=1)
    return np.abs(spec)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(mel_bins=MEL_BINS, f_min=F_MIN, f_max=F_MAX):
    points = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), mel_bins + 2))
    return points[1:-1]


def mel_filterbank(mel_bins=MEL_BINS, f_min=F_MIN, f_max=F_MAX,
                   sample_rate=SAMPLE_RATE, fft_size=FFT_SIZE):
    """Filtros triangulares (escala HTK) avaliados nas frequências contínuas dos bins."""
    nyquist = sample_rate / 2.0
    if f_max > nyquist:
        raise ConfigError(f"f_max={f_max} Hz acima de Nyquist ({nyquist} Hz)")
    if not 0.0 <= f_min < f_max:
        raise ConfigError(f"faixa de mel inválida: {f_min}..{f_max}")
    bin_freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    points = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), mel_bins + 2))
    lo, center, hi = points[:-2, None], points[1:-1, None], points[2:, None]
    up = (bin_freqs[None, :] - lo) / (center - lo)
    down = (hi - bin_freqs[None, :]) / (hi - center)
    bank = np.maximum(0.0, np.minimum(up, down))
    if np.any(bank.sum(axis=1) <= 0):
        raise ConfigError("filterbank com linha nula: poucos bins de FFT para mel_bins")
    return bank


def mel_project(mag, mel_bins=MEL_BINS, f_min=F_MIN, f_max=F_MAX,
                sample_rate=SAMPLE_RATE, fft_size=FFT_SIZE, floor=LOG_FLOOR):
    """Energia (|X|²) -> filterbank mel -> log natural com piso."""
    mag = np.asarray(mag, dtype=np.float64)
    bank = mel_filterbank(mel_bins, f_min, f_max, sample_rate, fft_size)
    if mag.shape[1] != bank.shape[1]:
        raise ConfigError(f"bins de magnitude ({mag.shape[1]}) não batem com fft_size={fft_size}")
    energy = (mag ** 2) @ bank.T
    return np.log(np.maximum(energy, floor))

# ==========================================
# 3. ALINHAMENTO COM O VÍDEO
# ==========================================

def align_to_video(mel, T):
    """Exatamente 4T linhas: corta excesso, replica a última linha se faltar até 2."""
    frames = mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    target = AUDIO_FRAMES_PER_VIDEO_FRAME * T
    have = frames.shape[0]
    if have >= target:
        return frames[:target]
    deficit = target - have
    if deficit > MAX_ALIGN_DEFICIT or have == 0:
        raise AlignmentError(
            f"mel com {have} frames para T={T} (esperado {target}); verifique hop ({HOP_LEN}) e fps ({VIDEO_FPS})")
    return np.concatenate([frames, np.repeat(frames[-1:], deficit, axis=0)], axis=0)


def log_mel_for_video(waveform, T, mel_bins=MEL_BINS):
    """Pipeline completo: waveform -> A[4T x M]."""
    if waveform.sample_rate != SAMPLE_RATE:
        raise DataError(f"somente {SAMPLE_RATE} Hz é aceito (recebeu {waveform.sample_rate})")
    mag = stft_magnitude(waveform)
    mel = MelSpectrogram(mel_project(mag, mel_bins=mel_bins), mel_bins=mel_bins)
    return align_to_video(mel, T)
