import re


def slugify(value: str) -> str:
    """Filesystem-safe single path component for model ids such as 'org/Model-70B'."""
    slug = re.sub(r"[^A-Za-z0-9._-]+", "_", value).strip("._")
    return slug or "_"
