"""Chat-completion provider and prompt template loading."""
from __future__ import annotations

from importlib import resources
from pathlib import Path
from typing import Protocol

from .errors import ConfigError, ProviderError
from .http import JsonClient


class ChatProvider(Protocol):
    model_id: str

    def complete(self, messages: list[dict[str, str]]) -> str: ...


class RemoteChatProvider:
    """``{"model", "messages"}`` in, ``{"choices": [{"message": {"content"}}]}`` out."""

    def __init__(self, client: JsonClient, model: str):
        if not model:
            raise ConfigError("llm.model is not configured")
        self.client = client
        self.model_id = model

    def complete(self, messages: list[dict[str, str]]) -> str:
        body = self.client.post({"model": self.model_id, "messages": messages})
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"malformed chat response: {exc!r}") from exc
        if not isinstance(content, str):
            raise ProviderError("malformed chat response: content is not a string")
        return content


def load_template(name_or_path: str | Path | None, default: str) -> str:
    """Read a template file, or the packaged default ``default`` when unset."""
    if name_or_path:
        path = Path(name_or_path)
        if not path.is_file():
            raise ConfigError(f"template file not found: {path}")
        return path.read_text(encoding="utf-8")
    return resources.files("conformal_rag.templates").joinpath(default).read_text(encoding="utf-8")


def render(template: str, **values: str) -> str:
    out = template
    for key, value in values.items():
        out = out.replace("{{" + key + "}}", value)
    return out
