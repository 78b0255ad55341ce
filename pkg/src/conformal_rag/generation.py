"""Prompt assembly from retrieved chunks, and the final answer call."""
from __future__ import annotations

import time
from dataclasses import dataclass

from .errors import ConfigError, GenerationError, ProviderError
from .llm import ChatProvider, load_template, render
from .retrieval import RetrievedContext
from .vectorstore import VectorStore

DEFAULT_ABSTENTION = "I cannot answer this question from the available context."
NO_CONTEXT_MARKER = "(no context passages were retrieved)"
BLOCK_SEPARATOR = "\n\n"


@dataclass(frozen=True)
class AssembledPrompt:
    system_text: str
    context_blocks: tuple[tuple[str, str], ...]
    question: str
    user_text: str
    abstain: bool

    @property
    def total_chars(self) -> int:
        return len(self.system_text) + len(self.user_text)

    def messages(self) -> list[dict[str, str]]:
        return [
            {"role": "system", "content": self.system_text},
            {"role": "user", "content": self.user_text},
        ]


@dataclass(frozen=True)
class AnswerResult:
    text: str
    model_id: str
    prompt_chars: int
    timing: float


def render_block(chunk_id: str, text: str) -> str:
    return f"[source: {chunk_id}]\n{text}"


def assemble_context(
    ctx: RetrievedContext,
    store: VectorStore,
    template: str | None = None,
    char_budget: int | None = None,
    *,
    system_template: str | None = None,
    abstention: str = DEFAULT_ABSTENTION,
) -> AssembledPrompt:
    """Render hits, best first, into a grounded prompt.

    When the rendered context exceeds ``char_budget`` the lowest-scoring
    blocks are dropped until it fits and ``ctx`` is marked truncated with
    reason ``char-budget``. With no blocks left the prompt asks for the
    abstention sentence verbatim.
    """
    template = template if template is not None else load_template(None, "answer.txt")
    if "{{context}}" not in template or "{{question}}" not in template:
        raise ConfigError("prompt template must contain {{context}} and {{question}} placeholders")
    system_template = system_template if system_template is not None else load_template(None, "system.txt")
    if char_budget is not None and char_budget < 0:
        raise ConfigError(f"retrieval.max_context_chars must be >= 0, got {char_budget}")

    blocks = [(h.chunk_id, store.chunk(h.chunk_id).text) for h in ctx.hits]
    if char_budget is not None:
        rendered = [render_block(cid, text) for cid, text in blocks]
        size = sum(len(r) for r in rendered) + len(BLOCK_SEPARATOR) * max(0, len(rendered) - 1)
        while blocks and size > char_budget:
            dropped = rendered.pop()
            blocks.pop()
            size -= len(dropped) + (len(BLOCK_SEPARATOR) if rendered else 0)
        if len(blocks) < len(ctx.hits):
            ctx.mark_truncated("char-budget")

    abstain = not blocks
    if abstain:
        context = NO_CONTEXT_MARKER
        system_text = f"No context is available. Reply exactly with: {abstention}"
    else:
        context = BLOCK_SEPARATOR.join(render_block(cid, text) for cid, text in blocks)
        system_text = render(system_template, abstention=abstention)
    user_text = render(template, context=context, question=ctx.question)
    return AssembledPrompt(
        system_text=system_text,
        context_blocks=tuple(blocks),
        question=ctx.question,
        user_text=user_text,
        abstain=abstain,
    )


def answer(prompt: AssembledPrompt, llm: ChatProvider) -> AnswerResult:
    start = time.perf_counter()
    try:
        text = llm.complete(prompt.messages())
    except ProviderError as exc:
        raise GenerationError(f"answer generation failed: {exc}", prompt, exc.attempts) from exc
    return AnswerResult(
        text=text, model_id=llm.model_id, prompt_chars=prompt.total_chars, timing=time.perf_counter() - start
    )
