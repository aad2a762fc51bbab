import logging
from pathlib import Path

from box import Box

from lscm import SIM_KINDS, LSCMConfig
from utils import ConfigError

log = logging.getLogger(__name__)

# --- 1. VALORES PADRÃO (escala de mesa) ---
DEFAULTS = {
    # LSCM
    "N": 3,
    "S": 3,
    "T": 64,
    "C": 64,
    "heads": 4,
    "k": 7,
    "s": 3,
    "sim_kind": "convolution",
    "mlp_ratio": 4,
    "use_lim": True,
    "use_sim": True,
    "use_pe": True,
    # encoders
    "crop": 32,
    "mel_bins": 40,
    "visual_widths": (16, 32, 32),
    "audio_widths": (16, 32, 64, 64),
    "tcn_blocks": 5,
    # otimização
    "lr": 1e-3,
    "decay": 0.95,
    "beta1": 0.9,
    "beta2": 0.999,
    "adam_eps": 1e-8,
    "epochs": 10,
    "batch_size": 4,
    # aumentação
    "aug_visual": False,
    "aug_audio": False,
    # dados sintéticos
    "n_train": 200,
    "n_val": 50,
    "scene_frames": 64,
    "num_people_min": 1,
    "num_people_max": 4,
    "overlap_prob": 0.1,
    "off_screen_prob": 0.1,
    "silence_prob": 0.2,
    "snr_db_min": 5.0,
    "snr_db_max": 20.0,
    "mean_turn_frames": 30.0,
    "hard_split": False,
    # execução
    "seed": 0,
    "workers": 4,
    "ablation_seeds": 1,
    "dataset": "data",
    "checkpoint": "runs/loconet.lcnt",
    "out": "runs",
}

PROBABILITY_KEYS = ("overlap_prob", "off_screen_prob", "silence_prob")

# ==========================================
# 1. LEITURA E COERÇÃO
# ==========================================

def coerce(key, raw):
    """Converte o texto de key=value para o tipo do valor padrão."""
    if key not in DEFAULTS:
        raise ConfigError(f"chave de configuração desconhecida: '{key}'")
    default = DEFAULTS[key]
    if not isinstance(raw, str):
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw)
        if isinstance(default, bool):
            return bool(raw)
        return type(default)(raw)
    text = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in ("true", "1", "yes", "sim"):
                return True
            if lowered in ("false", "0", "no", "nao", "não"):
                return False
            raise ValueError(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.split(",") if v.strip())
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"valor inválido para '{key}': {text!r}") from None
    return text


def parse_config_text(text, source="<config>"):
    values = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: esperado key=value, recebeu {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        values[key] = coerce(key, raw)
    return values


def load_config(path=None, overrides=None):
    """DEFAULTS <- arquivo key=value <- overrides (CLI). Devolve Box congelado e validado."""
    values = dict(DEFAULTS)
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"Falha ao ler config {path}: {e}") from e
        values.update(parse_config_text(text, str(path)))
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = coerce(key, value)
    cfg = Box(values, frozen_box=True)
    return validate_config(cfg)


def config_from_dict(d):
    """Reconstrói a config gravada no sidecar do checkpoint (chaves ausentes ficam no padrão)."""
    return load_config(overrides={k: v for k, v in d.items()})


def config_to_dict(cfg):
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.to_dict().items()}


def config_to_text(cfg):
    lines = []
    for key in DEFAULTS:
        v = cfg[key]
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{key}={v}")
    return "\n".join(lines) + "\n"


def with_overrides(cfg, **changes):
    values = cfg.to_dict()
    values.update({k: coerce(k, v) for k, v in changes.items()})
    return validate_config(Box(values, frozen_box=True))

# ==========================================
# 2. VALIDAÇÃO
# ==========================================

def validate_config(cfg):
    if cfg.lr <= 0:
        raise ConfigError(f"lr precisa ser > 0, recebeu {cfg.lr}")
    if cfg.epochs < 1:
        raise ConfigError(f"epochs precisa ser >= 1, recebeu {cfg.epochs}")
    if not 0.0 < cfg.decay <= 1.0:
        raise ConfigError(f"decay precisa estar em (0, 1], recebeu {cfg.decay}")
    if cfg.batch_size < 1:
        raise ConfigError(f"batch_size precisa ser >= 1, recebeu {cfg.batch_size}")
    if cfg.T < 1 or cfg.scene_frames < 1:
        raise ConfigError("T e scene_frames precisam ser >= 1")
    if cfg.sim_kind not in SIM_KINDS:
        raise ConfigError(f"sim_kind desconhecido: {cfg.sim_kind} (opções: {SIM_KINDS})")
    for key in PROBABILITY_KEYS:
        if not 0.0 <= cfg[key] <= 1.0:
            raise ConfigError(f"{key}={cfg[key]} fora de [0, 1]")
    if not 1 <= cfg.num_people_min <= cfg.num_people_max:
        raise ConfigError(f"num_people_min/max inválidos: {cfg.num_people_min}..{cfg.num_people_max}")
    if cfg.snr_db_min > cfg.snr_db_max:
        raise ConfigError("snr_db_min maior que snr_db_max")
    if len(cfg.visual_widths) < 1 or len(cfg.audio_widths) != 4:
        raise ConfigError("visual_widths precisa de >= 1 valor e audio_widths de exatamente 4")
    if cfg.ablation_seeds < 1:
        raise ConfigError("ablation_seeds precisa ser >= 1")
    lscm_config(cfg)
    return cfg


def lscm_config(cfg):
    return LSCMConfig(N=cfg.N, S=cfg.S, T=cfg.T, C=cfg.C, heads=cfg.heads, k=cfg.k, s=cfg.s,
                      sim_kind=cfg.sim_kind, mlp_ratio=cfg.mlp_ratio, use_lim=cfg.use_lim,
                      use_sim=cfg.use_sim, use_pe=cfg.use_pe).validate()
