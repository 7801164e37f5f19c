import re

from splatsdf.errors import ConfigError


def convert_to_int_or_float_if_possible(value):
    try:
        int_value = int(value)
        return int_value
    except ValueError:
        try:
            float_value = float(value)
            return float_value
        except ValueError:
            return value


def convert_value(value):
    """Convert a config string into bool, int, float or leave it as a string."""
    lowered = value.lower()
    if lowered in ("true", "yes", "on"):
        return True
    if lowered in ("false", "no", "off"):
        return False
    return convert_to_int_or_float_if_possible(value)


class KeyValueStore:
    """Sectioned ``key = value`` text store.

    Lines before the first ``[section]`` header belong to the section named ``""``.
    ``#`` starts a comment. Both ``key = value`` and ``key value`` forms are accepted.
    """

    def __init__(self, fname=None):
        self.cfg = {}
        if fname is not None:
            self.read_file(fname)

    def read_file(self, fname):
        with open(fname, 'r') as config_file:
            self.read_string(config_file.read(), source=fname)

    def read_string(self, text, source="<string>"):
        section = ""
        for lineno, line in enumerate(text.splitlines(), start=1):
            # remove all comments
            line = re.sub("#.*", "", line).strip()
            if not line:
                continue
            header = re.fullmatch(r"\[\s*([A-Za-z0-9_\-]+)\s*\]", line)
            if header:
                section = header.group(1)
                self.cfg.setdefault(section, {})
                continue
            if "=" in line:
                key, value = line.split("=", 1)
            else:
                line = re.sub(r"\s+", " ", line)
                if " " not in line:
                    raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
                key, value = line.split(" ", 1)
            key = key.strip()
            if not key:
                raise ConfigError(f"{source}:{lineno}: empty key")
            self.cfg.setdefault(section, {})[key] = value.strip()

    def set(self, section, key, value):
        self.cfg.setdefault(section, {})[key] = str(value)

    def get(self, section, key, default=None):
        return self.cfg.get(section, {}).get(key, default)

    def sections(self):
        return list(self.cfg.keys())

    def items(self, section):
        return list(self.cfg.get(section, {}).items())

    def to_text(self):
        lines = []
        for section, values in self.cfg.items():
            if section:
                if lines:
                    lines.append("")
                lines.append(f"[{section}]")
            for key, value in values.items():
                lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"
