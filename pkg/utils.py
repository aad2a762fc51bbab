import json
import logging
import sys
import zlib
from pathlib import Path

import numpy as np

# ==========================================
# 1. ERROS
# ==========================================

class LoconetError(Exception):
    """Base de todos os erros do projeto."""


class ShapeError(LoconetError):
    pass


class ConfigError(LoconetError):
    pass


class DataError(LoconetError):
    pass


class AlignmentError(DataError):
    """Mel e vídeo desalinhados além da tolerância (hop ou fps errado)."""


class UsageError(LoconetError):
    pass


class CheckpointError(LoconetError):
    pass


class VersionError(CheckpointError):
    """Versão de formato desconhecida ou checkpoint incompatível com a config."""


class UndefinedMetricError(LoconetError):
    """Métrica sem definição para o conjunto (ex.: AP sem positivos)."""


def shape_error(op, a, b):
    return ShapeError(f"{op}: formas incompatíveis {tuple(a)} e {tuple(b)}")

# ==========================================
# 2. LOGGING
# ==========================================

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

def setup_logging(level="INFO"):
    """Configura o logger raiz em stderr (stdout fica livre para dados)."""
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(level)
    return root

# ==========================================
# 3. RNG DETERMINÍSTICO (Philox, contador)
# ==========================================

def stable_key(value):
    """Converte str/int em chave inteira estável entre execuções (hash() não é)."""
    if isinstance(value, (int, np.integer)):
        return int(value) & 0xFFFFFFFF
    return zlib.crc32(str(value).encode("utf-8"))


def rng_for(seed, *keys):
    """
    Gerador filho derivado de (seed, chaves...).
    Mesmos argumentos -> mesma sequência; chaves diferentes -> fluxos independentes.
    """
    entropy = [stable_key(seed)] + [stable_key(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

# ==========================================
# 4. ARQUIVOS
# ==========================================

def dump_json(path, payload):
    """JSON determinístico (chaves ordenadas, LF) para saídas comparáveis byte a byte."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(payload, f, indent=2, sort_keys=True, ensure_ascii=False)
            f.write("\n")
    except OSError as e:
        raise DataError(f"Falha ao gravar {path}: {e}") from e
    return path


def load_json(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except OSError as e:
        raise DataError(f"Falha ao ler {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"JSON inválido em {path}: {e}") from e


def ensure_dir(path):
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"Não foi possível criar {path}: {e}") from e
    return path
