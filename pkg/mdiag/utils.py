import os
import sys
import json
import hashlib
import logging
import platform
import re
import tempfile


def detect_encoding(file_path):
    import chardet
    import charset_normalizer

    with open(file_path, "rb") as f:
        raw_data = f.read()
    detected_encoding = None
    for detectors in (charset_normalizer, chardet):
        try:
            result = detectors.detect(raw_data)["encoding"]
        except Exception:
            continue
        if result is not None:
            detected_encoding = result
            break
    encoding = detected_encoding if detected_encoding else "utf-8"
    return encoding.lower()


def get_resource_path(package, resource):
    """
    Get the path to a packaged resource, with fallback to the source tree.

    Args:
        package (str): Package name containing the resource (e.g., 'mdiag.templates')
        resource (str): Resource path relative to the package (e.g., 'manifest.json')

    Returns:
        str: Path to the resource file, or None if not found
    """
    from importlib import resources

    try:
        candidate = resources.files(package).joinpath(resource)
        if candidate.is_file():
            return str(candidate)
    except (ImportError, ModuleNotFoundError, FileNotFoundError, TypeError):
        pass

    # Resolve relative to this file (editable installs, zipped wheels aside)
    parts = package.split(".")
    rel_path = os.path.join(
        os.path.dirname(os.path.abspath(__file__)), *parts[1:], resource
    )
    if os.path.exists(rel_path):
        return rel_path

    return None


def get_version():
    """Return the current version of the package."""
    try:
        with open(get_resource_path("mdiag", "VERSION"), "r") as f:
            return f.read().strip()
    except Exception:
        return "Unknown"


# Define config path
def get_user_config_path():
    from platformdirs import user_config_dir

    # On non-Windows, prefer ~/.config/mdiag if it already exists
    if platform.system() != "Windows":
        custom_dir = os.path.join(os.path.expanduser("~"), ".config", "mdiag")
        if os.path.exists(custom_dir):
            config_dir = custom_dir
        else:
            config_dir = user_config_dir("mdiag", appauthor=False, roaming=True)
    else:
        config_dir = user_config_dir("mdiag", appauthor=False, roaming=True)

    return os.path.join(config_dir, "config.json")


# Define cache path
def get_user_cache_path(folder=None):
    from platformdirs import user_cache_dir

    cache_dir = user_cache_dir(
        "mdiag", appauthor=False, opinion=True, ensure_exists=True
    )
    if folder:
        cache_dir = os.path.join(cache_dir, folder)
        os.makedirs(cache_dir, exist_ok=True)
    return cache_dir


def load_config(path=None):
    """Read a JSON config document; the user config file when no path is given."""
    try:
        with open(path or get_user_config_path(), "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        return {}


def clean_text(text):
    """Collapse runs of spaces per line and squeeze blank lines to one paragraph break."""
    lines = [re.sub(r"[^\S\n]+", " ", line).strip() for line in text.splitlines()]
    text = "\n".join(lines)
    return re.sub(r"\n{3,}", "\n\n", text).strip()


def configure_logging(level=logging.INFO):
    """Install a single stderr handler on the root logger if none is configured."""
    root = logging.getLogger()
    if not root.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(
            logging.Formatter("%(asctime)s - %(levelname)s - %(message)s")
        )
        root.addHandler(handler)
    root.setLevel(level)
    # httpx logs every request at INFO
    logging.getLogger("httpx").setLevel(max(level, logging.WARNING))


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def sha256_text(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def digest_obj(obj):
    """Stable digest of any JSON-serializable object."""
    return sha256_text(canonical_json(obj))


def write_text_atomic(path, text):
    """Write through a temporary sibling so readers never see a partial file."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=os.path.basename(path) + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def write_json(path, obj):
    write_text_atomic(
        path, json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    )


def read_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def round_floats(obj, digits=6):
    """Round every float in a JSON-like structure; keeps report bytes stable."""
    if isinstance(obj, float):
        return round(obj, digits)
    if isinstance(obj, dict):
        return {key: round_floats(value, digits) for key, value in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round_floats(value, digits) for value in obj]
    return obj
