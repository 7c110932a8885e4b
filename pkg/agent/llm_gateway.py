# agent/llm_gateway.py
"""
Chat-protocol client for the agents.

Two backends implement the same `complete` contract: an HTTP backend that talks to
any OpenAI-compatible `/chat/completions` endpoint through langchain-openai, and a
scripted backend that replays canned replies keyed by (role, step, seed) for
offline, reproducible runs. Structured outputs are validated client-side and
re-prompted with the validation error on failure.
"""
import logging
import os
import re
import threading
import time
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Protocol, Tuple, Type, TypeVar, Union

import openai
from langchain_core.messages import AIMessage, BaseMessage, HumanMessage, SystemMessage, ToolMessage
from langchain_openai import ChatOpenAI
from pydantic import BaseModel, ConfigDict, Field, SecretStr, ValidationError
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt, wait_exponential

from agent.config import (
    DEFAULT_RETRY_LIMIT,
    HTTP_TIMEOUT_SECONDS,
    MAX_COMPLETION_TOKENS,
    TRANSPORT_ATTEMPTS,
    TRANSPORT_BACKOFF_SECONDS,
)
from utils.errors import ContextOverflow, OutputValidationError, SchemaExhausted, ScriptMiss, TransportError
from utils.json_extract import first_json_object
from utils.paths import slugify

logger = logging.getLogger(__name__)

T = TypeVar("T")

ANY = "any"
ScriptKey = Tuple[str, str, str]


class ChatRole(str, Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"
    TOOL = "tool"


class ChatMessage(BaseModel):
    model_config = ConfigDict(frozen=True)

    role: ChatRole
    content: str

    @classmethod
    def system(cls, content: str) -> "ChatMessage":
        return cls(role=ChatRole.SYSTEM, content=content)

    @classmethod
    def user(cls, content: str) -> "ChatMessage":
        return cls(role=ChatRole.USER, content=content)

    @classmethod
    def assistant(cls, content: str) -> "ChatMessage":
        return cls(role=ChatRole.ASSISTANT, content=content)

    def to_langchain(self) -> BaseMessage:
        if self.role is ChatRole.SYSTEM:
            return SystemMessage(content=self.content)
        if self.role is ChatRole.USER:
            return HumanMessage(content=self.content)
        if self.role is ChatRole.ASSISTANT:
            return AIMessage(content=self.content)
        return ToolMessage(content=self.content, tool_call_id="tool")


class FinishReason(str, Enum):
    STOP = "stop"
    LENGTH = "length"
    ERROR = "error"


class CompletionRequest(BaseModel):
    model_config = ConfigDict(frozen=True, protected_namespaces=())

    messages: Tuple[ChatMessage, ...] = Field(min_length=1)
    temperature: float = Field(default=0.0, ge=0.0, le=2.0)
    seed: int = Field(default=0, ge=0)
    max_completion_tokens: int = Field(default=MAX_COMPLETION_TOKENS, gt=0, le=MAX_COMPLETION_TOKENS)
    model_id: str = ""
    # agent role issuing the request; the scripted backend keys its replies on it
    role: str = ""
    output_schema: Optional[str] = None


class CompletionResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    text: str
    # server-reported count; None when the backend does not report usage
    completion_tokens: Optional[int] = None
    finish_reason: FinishReason = FinishReason.STOP
    latency: float = 0.0


class BackendKind(str, Enum):
    HTTP = "http"
    SCRIPTED = "scripted"


class BackendConfig(BaseModel):
    """Backend selection; HTTP fields and scripted fields are mutually exclusive in practice."""
    model_config = ConfigDict(frozen=True)

    kind: BackendKind = BackendKind.SCRIPTED
    endpoint_url: Optional[str] = None
    api_key: Optional[SecretStr] = None
    script_table: Dict[ScriptKey, str] = Field(default_factory=dict)
    script_overlays: Dict[str, Dict[ScriptKey, str]] = Field(default_factory=dict)
    script_dir: Optional[Path] = None
    retry_limit: int = Field(default=DEFAULT_RETRY_LIMIT, ge=0)
    transport_attempts: int = Field(default=TRANSPORT_ATTEMPTS, ge=1)
    backoff_seconds: float = Field(default=TRANSPORT_BACKOFF_SECONDS, ge=0.0)

    @classmethod
    def from_env(cls, retry_limit: int = DEFAULT_RETRY_LIMIT) -> "BackendConfig":
        """HTTP backend from DSGFORGE_API_BASE / DSGFORGE_API_KEY."""
        required_vars = ["DSGFORGE_API_BASE"]
        missing_vars = [var for var in required_vars if not os.getenv(var)]
        if missing_vars:
            raise ValueError(f"Missing required environment variables: {', '.join(missing_vars)}")
        api_key = os.getenv("DSGFORGE_API_KEY") or "EMPTY"
        return cls(
            kind=BackendKind.HTTP,
            endpoint_url=os.getenv("DSGFORGE_API_BASE"),
            api_key=SecretStr(api_key),
            retry_limit=retry_limit,
        )

    @classmethod
    def scripted(
        cls,
        table: Optional[Mapping[Tuple[Any, Any, Any], str]] = None,
        script_dir: Optional[Union[str, Path]] = None,
        retry_limit: int = DEFAULT_RETRY_LIMIT,
    ) -> "BackendConfig":
        """Scripted backend from an in-memory table, a directory of canned replies, or both (table wins)."""
        base: Dict[ScriptKey, str] = {}
        overlays: Dict[str, Dict[ScriptKey, str]] = {}
        if script_dir is not None:
            base, overlays = load_script_dir(Path(script_dir))
        base.update({script_key(*key): text for key, text in (table or {}).items()})
        return cls(
            kind=BackendKind.SCRIPTED,
            script_table=base,
            script_overlays=overlays,
            script_dir=Path(script_dir) if script_dir is not None else None,
            retry_limit=retry_limit,
        )


def script_key(role: Any, step: Any, seed: Any) -> ScriptKey:
    """Normalizes a (role, step, seed) key; None or '*' mean any."""
    def norm(part: Any) -> str:
        if part is None or part == "*" or part == ANY:
            return ANY
        return str(int(part))
    return (str(getattr(role, "value", role)), norm(step), norm(seed))


def _read_table(directory: Path) -> Dict[ScriptKey, str]:
    table = {}
    for path in sorted(directory.glob("*.txt")):
        parts = path.stem.split("__")
        if len(parts) != 3:
            logger.warning(f"Ignoring canned reply with unexpected name: {path.name}")
            continue
        table[script_key(*parts)] = path.read_text(encoding="utf-8")
    return table


def load_script_dir(directory: Path) -> Tuple[Dict[ScriptKey, str], Dict[str, Dict[ScriptKey, str]]]:
    """
    Loads canned replies named `{role}__{step}__{seed}.txt` (step/seed may be `any`).

    Returns:
        The shared table and per-model overlay tables read from subdirectories.
    """
    if not directory.is_dir():
        raise FileNotFoundError(f"Script directory not found: {directory}")
    overlays = {sub.name: _read_table(sub) for sub in sorted(directory.iterdir()) if sub.is_dir()}
    return _read_table(directory), overlays


class ChatBackend(Protocol):
    def complete(self, request: CompletionRequest) -> CompletionResult:
        ...


_TOKEN = re.compile(r"\S+")


class ScriptedBackend:
    """
    Deterministic backend: replays canned text keyed by (role, step, seed).

    `step` is the number of earlier requests this backend has served for the same
    role, so one instance must be used per run.
    """

    def __init__(self, table: Mapping[ScriptKey, str], overlay: Optional[Mapping[ScriptKey, str]] = None):
        # overlay entries win over any base entry for the same role
        self._tables = [dict(overlay or {}), dict(table)]
        self._counters: Dict[str, int] = {}
        self._lock = threading.Lock()

    def lookup(self, role: str, step: int, seed: int) -> str:
        keys = ((role, str(step), str(seed)), (role, str(step), ANY), (role, ANY, str(seed)), (role, ANY, ANY))
        for table in self._tables:
            for key in keys:
                if key in table:
                    return table[key]
        raise ScriptMiss(f"No canned reply for role={role!r} step={step} seed={seed}")

    def complete(self, request: CompletionRequest) -> CompletionResult:
        with self._lock:
            step = self._counters.get(request.role, 0)
            self._counters[request.role] = step + 1
        text = self.lookup(request.role, step, request.seed)

        tokens = list(_TOKEN.finditer(text))
        if len(tokens) > request.max_completion_tokens:
            cut = tokens[request.max_completion_tokens - 1].end()
            return CompletionResult(
                text=text[:cut],
                completion_tokens=request.max_completion_tokens,
                finish_reason=FinishReason.LENGTH,
            )
        return CompletionResult(text=text, finish_reason=FinishReason.STOP)


_RETRYABLE = (
    openai.APIConnectionError,
    openai.APITimeoutError,
    openai.RateLimitError,
    openai.InternalServerError,
)


@lru_cache(maxsize=32)
def get_chat_model(
    endpoint_url: str,
    api_key: str,
    model_id: str,
    temperature: float,
    seed: int,
    max_tokens: int,
) -> ChatOpenAI:
    """Get cached instance of ChatOpenAI for one request configuration."""
    try:
        return ChatOpenAI(
            base_url=endpoint_url,
            api_key=api_key,
            model=model_id,
            temperature=temperature,
            seed=seed,
            max_tokens=max_tokens,
            max_retries=0,
            timeout=HTTP_TIMEOUT_SECONDS,
        )
    except Exception as e:
        logger.error(f"Failed to initialize ChatOpenAI model: {str(e)}")
        raise


def _finish_reason(raw: Optional[str]) -> FinishReason:
    if raw == "length":
        return FinishReason.LENGTH
    if raw in (None, "stop", "tool_calls", "function_call", "eos"):
        return FinishReason.STOP
    return FinishReason.ERROR


class HttpBackend:
    """OpenAI-compatible chat-completions backend with exponential-backoff transport retries."""

    def __init__(self, config: BackendConfig):
        if not config.endpoint_url:
            raise ValueError("HTTP backend requires endpoint_url")
        self.config = config

    def _model_for(self, request: CompletionRequest) -> ChatOpenAI:
        api_key = self.config.api_key.get_secret_value() if self.config.api_key else "EMPTY"
        return get_chat_model(
            self.config.endpoint_url,
            api_key,
            request.model_id,
            request.temperature,
            request.seed,
            request.max_completion_tokens,
        )

    def complete(self, request: CompletionRequest) -> CompletionResult:
        model = self._model_for(request)
        messages = [m.to_langchain() for m in request.messages]
        retrying = Retrying(
            stop=stop_after_attempt(self.config.transport_attempts),
            wait=wait_exponential(multiplier=self.config.backoff_seconds),
            retry=retry_if_exception_type(_RETRYABLE),
            reraise=True,
        )
        started = time.perf_counter()
        try:
            reply = retrying(model.invoke, messages)
        except openai.APIError as e:
            logger.error(f"Chat completion failed for role {request.role!r}: {str(e)}")
            raise TransportError(f"chat completion failed after {self.config.transport_attempts} attempts: {e}") from e
        latency = time.perf_counter() - started

        content = reply.content if isinstance(reply.content, str) else "".join(
            part.get("text", "") if isinstance(part, dict) else str(part) for part in reply.content
        )
        usage = getattr(reply, "usage_metadata", None) or {}
        tokens = usage.get("output_tokens")
        if tokens is None:
            tokens = (reply.response_metadata.get("token_usage") or {}).get("completion_tokens")
        return CompletionResult(
            text=content,
            completion_tokens=tokens,
            finish_reason=_finish_reason(reply.response_metadata.get("finish_reason")),
            latency=latency,
        )


def open_backend(config: BackendConfig, model_id: str = "") -> ChatBackend:
    """A fresh backend instance for one run (scripted step counters are per instance)."""
    if config.kind is BackendKind.HTTP:
        return HttpBackend(config)
    overlay = config.script_overlays.get(slugify(model_id)) if model_id else None
    return ScriptedBackend(config.script_table, overlay)


def complete(request: CompletionRequest, backend: ChatBackend) -> CompletionResult:
    """
    One chat completion. A length-capped reply is returned as data, never raised.

    Raises:
        TransportError: HTTP failure after retries
        ScriptMiss: scripted backend has no entry for the request
    """
    result = backend.complete(request)
    if result.finish_reason is FinishReason.LENGTH:
        logger.warning(f"Completion for role {request.role!r} hit the {request.max_completion_tokens}-token cap")
    return result


def count_completion_tokens(result: CompletionResult) -> int:
    if result.completion_tokens is not None:
        return result.completion_tokens
    return len(result.text.split())


class StructuredReply(BaseModel):
    """Parsed value plus the number of re-prompts it took and the final raw completion."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    value: Any
    retries: int
    result: CompletionResult


Parser = Callable[[str], T]


def pydantic_parser(model_cls: Type[BaseModel], check: Optional[Callable[[Any], None]] = None) -> Parser:
    """Parser that validates the first JSON object in a reply against `model_cls`."""
    def parse(text: str) -> Any:
        data = first_json_object(text)
        if data is None:
            raise OutputValidationError("no JSON object found in the reply")
        value = model_cls.model_validate(data)
        if check is not None:
            check(value)
        return value
    return parse


def complete_structured(
    request: CompletionRequest,
    backend: ChatBackend,
    parser: Parser,
    retry_limit: int = DEFAULT_RETRY_LIMIT,
) -> StructuredReply:
    """
    Completion parsed against a schema, re-prompting with the validation error.

    Issues at most retry_limit + 1 completions.

    Raises:
        ContextOverflow: a reply hit the completion-token cap (no re-prompt)
        SchemaExhausted: every attempt produced invalid output
        TransportError: HTTP failure after retries
    """
    messages: List[ChatMessage] = list(request.messages)
    last_error: Optional[Exception] = None
    for attempt in range(retry_limit + 1):
        result = complete(request.model_copy(update={"messages": tuple(messages)}), backend)
        if result.finish_reason is FinishReason.LENGTH:
            raise ContextOverflow(
                f"{request.role or 'agent'} reply exceeded {request.max_completion_tokens} completion tokens"
            )
        try:
            value = parser(result.text)
            return StructuredReply(value=value, retries=attempt, result=result)
        except (OutputValidationError, ValidationError, ValueError) as e:
            last_error = e
            logger.warning(f"Invalid {request.role or 'agent'} output (attempt {attempt + 1}/{retry_limit + 1}): {e}")
            messages.append(ChatMessage.assistant(result.text))
            messages.append(ChatMessage.user(
                f"Your previous output was invalid: {e}\n"
                "Reply again with output that satisfies the required structure."
            ))
    raise SchemaExhausted(
        f"{request.role or 'agent'} produced no valid output in {retry_limit + 1} attempts",
        last_error=last_error,
        attempts=retry_limit + 1,
    )


class AgentExchange(BaseModel):
    """One request/reply pair as written to agent_io_log.jsonl."""
    role: str
    request: List[Dict[str, str]]
    reply: str
    finish_reason: FinishReason
    completion_tokens: int
    latency: float


class LLMSession:
    """
    Per-run view of a backend: fixes model, temperature, seed and token cap, and
    records every exchange in order.
    """

    def __init__(
        self,
        backend: ChatBackend,
        model_id: str,
        temperature: float,
        seed: int,
        max_completion_tokens: int = MAX_COMPLETION_TOKENS,
        retry_limit: int = DEFAULT_RETRY_LIMIT,
    ):
        self.backend = backend
        self.model_id = model_id
        self.temperature = temperature
        self.seed = seed
        self.max_completion_tokens = min(max_completion_tokens, MAX_COMPLETION_TOKENS)
        self.retry_limit = retry_limit
        self.io_log: List[AgentExchange] = []
        self._lock = threading.Lock()

    @classmethod
    def open(cls, config: BackendConfig, model_id: str, temperature: float, seed: int,
             max_completion_tokens: int = MAX_COMPLETION_TOKENS) -> "LLMSession":
        return cls(open_backend(config, model_id), model_id, temperature, seed,
                   max_completion_tokens, config.retry_limit)

    def complete(self, request: CompletionRequest) -> CompletionResult:
        """ChatBackend implementation that records the exchange."""
        result = complete(request, self.backend)
        exchange = AgentExchange(
            role=request.role,
            request=[{"role": m.role.value, "content": m.content} for m in request.messages],
            reply=result.text,
            finish_reason=result.finish_reason,
            completion_tokens=count_completion_tokens(result),
            latency=result.latency,
        )
        with self._lock:
            self.io_log.append(exchange)
        return result

    def request(self, role: str, messages: List[ChatMessage], output_schema: Optional[str] = None) -> CompletionRequest:
        return CompletionRequest(
            messages=tuple(messages),
            temperature=self.temperature,
            seed=self.seed,
            max_completion_tokens=self.max_completion_tokens,
            model_id=self.model_id,
            role=role,
            output_schema=output_schema,
        )

    def ask(self, role: str, messages: List[ChatMessage], parser: Parser, output_schema: Optional[str] = None) -> StructuredReply:
        return complete_structured(self.request(role, messages, output_schema), self, parser, self.retry_limit)

    def ask_text(self, role: str, messages: List[ChatMessage]) -> CompletionResult:
        """Free-text completion; a length-capped reply raises ContextOverflow."""
        result = self.complete(self.request(role, messages))
        if result.finish_reason is FinishReason.LENGTH:
            raise ContextOverflow(f"{role} reply exceeded {self.max_completion_tokens} completion tokens")
        return result
