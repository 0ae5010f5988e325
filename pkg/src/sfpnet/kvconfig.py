"""Flat key=value config files with # comments (diff-friendly, no nesting)."""

from .errors import ConfigError


def parse_kv_text(text, source="<config>"):
    """Parse key=value lines; returns dict plus a {key: line_no} map."""
    out = {}
    lines = {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{no}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{no}: duplicate key {key!r}")
        out[key] = val.strip()
        lines[key] = no
    return out, lines


def load_kv(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_kv_text(fh.read(), source=str(path))


def dump_kv(mapping):
    return "".join(f"{k}={v}\n" for k, v in mapping.items())


def parse_int(kv, lines, key, default, source="<config>", minimum=None):
    if key not in kv or kv[key] == "":
        return default
    try:
        val = int(kv[key])
    except ValueError:
        raise ConfigError(f"{source}:{lines[key]}: {key} must be an integer, got {kv[key]!r}") from None
    if minimum is not None and val < minimum:
        raise ConfigError(f"{source}:{lines[key]}: {key} must be >= {minimum}, got {val}")
    return val


def parse_float(kv, lines, key, default, source="<config>"):
    if key not in kv or kv[key] == "":
        return default
    try:
        return float(kv[key])
    except ValueError:
        raise ConfigError(f"{source}:{lines[key]}: {key} must be a number, got {kv[key]!r}") from None


def parse_bool(kv, lines, key, default, source="<config>"):
    if key not in kv or kv[key] == "":
        return default
    val = kv[key].lower()
    if val in ("1", "true", "yes", "on"):
        return True
    if val in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{source}:{lines[key]}: {key} must be a boolean, got {kv[key]!r}")


def parse_int_tuple(kv, lines, key, default, source="<config>"):
    if key not in kv or kv[key] == "":
        return default
    try:
        return tuple(int(tok) for tok in kv[key].split(","))
    except ValueError:
        raise ConfigError(
            f"{source}:{lines[key]}: {key} must be comma-separated integers, got {kv[key]!r}"
        ) from None


def parse_float_tuple(kv, lines, key, default, source="<config>"):
    if key not in kv or kv[key] == "":
        return default
    try:
        return tuple(float(tok) for tok in kv[key].split(","))
    except ValueError:
        raise ConfigError(
            f"{source}:{lines[key]}: {key} must be comma-separated numbers, got {kv[key]!r}"
        ) from None


def parse_choice(kv, lines, key, default, choices, source="<config>"):
    if key not in kv or kv[key] == "":
        return default
    val = kv[key]
    if val not in choices:
        raise ConfigError(f"{source}:{lines[key]}: {key} must be one of {choices}, got {val!r}")
    return val


def reject_unknown(kv, lines, known, source="<config>"):
    for key in kv:
        if key not in known:
            raise ConfigError(f"{source}:{lines[key]}: unknown key {key!r}")
