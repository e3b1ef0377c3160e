"""
Chat-completion backends, prompt templates and JSON reply extraction

All agent roles share one backend instance per run. Two backends exist: an
HTTP client speaking the OpenAI-style chat-completions wire format with token
log-probabilities, and a deterministic scripted mock for offline runs.
"""

# standard libraries
import enum
import functools
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

# external libraries
import httpx

# internal modules
from . import config
from .check_inputs import (
    BackendUnreachable,
    ConfigInvalid,
    InvalidJson,
    InvalidRequest,
    LogprobsUnavailable,
    MalformedBackendReply,
    NoJsonFound,
    UnboundSlot,
    UnknownTemplate,
)

logger = logging.getLogger(__name__)


class TemplateId(enum.Enum):
    REFLECTOR = "Reflector"
    ROUTER = "Router"
    REASONER = "Reasoner"
    AUDITOR = "Auditor"
    STEWARD = "Steward"
    JUDGE = "Judge"


TEMPLATE_FILES = {
    TemplateId.REFLECTOR: "reflector.txt",
    TemplateId.ROUTER: "router.txt",
    TemplateId.REASONER: "reasoner.txt",
    TemplateId.AUDITOR: "auditor.txt",
    TemplateId.STEWARD: "steward.txt",
    TemplateId.JUDGE: "judge.txt",
}

_SLOT = re.compile(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}")


def as_template_id(template_id):
    """
    Accepts a TemplateId or its name ("Router", "router", ...)

    Raises
    ------
    UnknownTemplate
    """

    if isinstance(template_id, TemplateId):
        return template_id
    for tid in TemplateId:
        if str(template_id).lower() in (tid.value.lower(), tid.name.lower()):
            return tid
    raise UnknownTemplate("no template registered as " + repr(template_id))


@functools.lru_cache(maxsize=None)
def _read_template(path):
    with open(path, encoding="utf-8") as f:
        return f.read()


def load_template(template_id, template_dir=None):
    """
    Returns the raw text of a template

    Parameters
    ----------
    template_id : TemplateId or str
        which template
    template_dir : str, optional
        directory overriding the shipped templates

    Returns
    -------
    str
        the template text with its {{ slot }} markers
    """

    tid = as_template_id(template_id)
    if template_dir is None:
        template_dir = config.path_params["templates"]
    path = os.path.join(template_dir, TEMPLATE_FILES[tid])
    if not os.path.isfile(path):
        raise UnknownTemplate("template file not found: " + path)
    return _read_template(path)


def template_slots(text):
    """
    Slot names referenced by a template, in order of first appearance
    """

    names = []
    for m in _SLOT.finditer(text):
        if m.group(1) not in names:
            names.append(m.group(1))
    return names


def render_template(template_id, bindings, template_dir=None):
    """
    Substitutes every slot of a template verbatim

    Parameters
    ----------
    template_id : TemplateId or str
        which template
    bindings : dict
        slot name -> text
    template_dir : str, optional
        directory overriding the shipped templates

    Returns
    -------
    str
        the rendered prompt

    Raises
    ------
    UnboundSlot
        if the template references a slot with no binding
    UnknownTemplate
    """

    text = load_template(template_id, template_dir)

    def substitute(match):
        name = match.group(1)
        if name not in bindings:
            raise UnboundSlot(name)
        return str(bindings[name])

    return _SLOT.sub(substitute, text)


# requests and responses


@dataclass(frozen=True)
class ChatRequest:
    template_id: TemplateId
    rendered_prompt: str
    max_output_tokens: int = config.backend_params["max_output_tokens"]
    want_logprobs: bool = True
    decode_temperature: float = config.backend_params["temperature"]

    def __post_init__(self):
        try:
            object.__setattr__(self, "template_id", as_template_id(self.template_id))
        except UnknownTemplate as err:
            raise InvalidRequest(str(err))
        if not isinstance(self.rendered_prompt, str) or not self.rendered_prompt.strip():
            raise InvalidRequest("rendered_prompt is empty")
        if isinstance(self.max_output_tokens, bool) or not isinstance(
            self.max_output_tokens, int
        ) or self.max_output_tokens <= 0:
            raise InvalidRequest("max_output_tokens must be a positive integer")
        if self.decode_temperature < 0:
            raise InvalidRequest("decode_temperature cannot be negative")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    token_logprobs: Optional[tuple]
    backend_name: str
    latency_ms: int = 0

    def __post_init__(self):
        if self.token_logprobs is not None:
            values = tuple(float(x) for x in self.token_logprobs)
            if any(x > 0 for x in values):
                raise MalformedBackendReply("token log-probabilities must be <= 0")
            object.__setattr__(self, "token_logprobs", values)


class ChatBackend:
    """
    Base class: thread-safe call accounting shared by every backend

    Subclasses implement `_complete(request)`.
    """

    name = "base"

    def __init__(self):
        self._lock = threading.Lock()
        self._calls = {tid.value: 0 for tid in TemplateId}

    def complete(self, request):
        """
        Runs one chat completion

        Parameters
        ----------
        request : ChatRequest

        Returns
        -------
        ChatResponse

        Raises
        ------
        BackendUnreachable, MalformedBackendReply, LogprobsUnavailable
        """

        if not isinstance(request, ChatRequest):
            raise InvalidRequest("complete() needs a ChatRequest")
        with self._lock:
            self._calls[request.template_id.value] += 1
        return self._complete(request)

    def _complete(self, request):
        raise NotImplementedError

    def call_count(self, template_id):
        with self._lock:
            return self._calls[as_template_id(template_id).value]

    @property
    def calls(self):
        with self._lock:
            return dict(self._calls)

    def close(self):
        pass


# mock backend

MOCK_LOGPROB = -0.05


@dataclass(frozen=True)
class MockEntry:
    """
    One scripted reply

    Matches when the template agrees (None matches any), every `contains`
    substring occurs in the prompt and no `absent` substring does.
    """

    template: Optional[TemplateId]
    contains: tuple = ()
    absent: tuple = ()
    response_text: str = "{}"
    logprobs: Optional[tuple] = None
    omit_logprobs: bool = False
    error: Optional[str] = None

    def matches(self, request):
        if self.template is not None and self.template != request.template_id:
            return False
        prompt = request.rendered_prompt
        return all(s in prompt for s in self.contains) and not any(
            s in prompt for s in self.absent
        )


def _as_tuple(value):
    if value is None:
        return ()
    if isinstance(value, str):
        return (value,)
    return tuple(str(v) for v in value)


def mock_entry_from_dict(record):
    """
    Builds a MockEntry from one script record

    Record keys: template, contains (str or list), absent, response (text or
    a JSON object), logprobs, omit_logprobs, error ("unreachable" or
    "malformed").

    Raises
    ------
    ConfigInvalid
    """

    if not isinstance(record, dict):
        raise ConfigInvalid("mock script entries must be objects")

    template = record.get("template")
    if template is not None:
        try:
            template = as_template_id(template)
        except UnknownTemplate as err:
            raise ConfigInvalid(str(err))

    response = record.get("response", "{}")
    if not isinstance(response, str):
        response = json.dumps(response, ensure_ascii=False)

    logprobs = record.get("logprobs")
    if logprobs is not None:
        logprobs = tuple(float(x) for x in logprobs)
        if any(x > 0 for x in logprobs):
            raise ConfigInvalid("mock logprobs must be <= 0")

    error = record.get("error")
    if error not in (None, "unreachable", "malformed"):
        raise ConfigInvalid("unknown mock error kind: " + str(error))

    return MockEntry(
        template=template,
        contains=_as_tuple(record.get("contains")),
        absent=_as_tuple(record.get("absent")),
        response_text=response,
        logprobs=logprobs,
        omit_logprobs=bool(record.get("omit_logprobs", False)),
        error=error,
    )


@dataclass
class MockScript:
    entries: list = field(default_factory=list)
    default: MockEntry = field(default_factory=lambda: MockEntry(template=None))

    @classmethod
    def from_records(cls, records):
        entries = []
        default = None
        for record in records:
            entry = mock_entry_from_dict(record)
            if record.get("default", False):
                if default is not None:
                    raise ConfigInvalid("mock script has more than one default entry")
                default = entry
            else:
                entries.append(entry)
        if default is None:
            default = MockEntry(template=None)
        return cls(entries, default)

    @classmethod
    def from_jsonl(cls, path):
        records = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f):
                if not line.strip() or line.lstrip().startswith("#"):
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as err:
                    raise ConfigInvalid(
                        "mock script line " + str(lineno + 1) + " is not JSON: " + str(err)
                    )
        return cls.from_records(records)


def default_logprobs(text):
    return tuple(MOCK_LOGPROB for _ in range(max(1, len(text.split()))))


class MockBackend(ChatBackend):
    """
    Deterministic scripted backend: the first matching entry answers

    Identical request sequences yield identical response sequences.
    """

    name = "mock"

    def __init__(self, script):
        super().__init__()
        if isinstance(script, str):
            script = MockScript.from_jsonl(script)
        elif isinstance(script, list):
            script = MockScript.from_records(script)
        self.script = script
        self.log = []

    def _select(self, request):
        for entry in self.script.entries:
            if entry.matches(request):
                return entry
        return self.script.default

    def _complete(self, request):
        entry = self._select(request)
        with self._lock:
            self.log.append((request.template_id.value, request.rendered_prompt))

        if entry.error == "unreachable":
            raise BackendUnreachable("scripted outage")
        if entry.error == "malformed":
            raise MalformedBackendReply("scripted malformed reply")

        if not request.want_logprobs:
            return ChatResponse(entry.response_text, None, self.name, 0)

        if entry.omit_logprobs:
            raise LogprobsUnavailable(
                ChatResponse(entry.response_text, None, self.name, 0)
            )
        logprobs = entry.logprobs
        if logprobs is None:
            logprobs = default_logprobs(entry.response_text)
        return ChatResponse(entry.response_text, logprobs, self.name, 0)


# http backend


class HTTPBackend(ChatBackend):
    """
    OpenAI-style chat-completions client

    Transport errors, timeouts, 429 and 5xx answers are retried with
    exponential backoff; at most `retries` attempts are made per call.
    """

    name = "http"

    def __init__(
        self,
        endpoint=config.backend_params["endpoint"],
        model=config.backend_params["model"],
        api_key=None,
        timeout_ms=config.backend_params["timeout_ms"],
        retries=config.backend_params["retries"],
        backoff_s=config.backend_params["backoff_s"],
        transport=None,
        sleep=time.sleep,
    ):
        super().__init__()
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = "Bearer " + api_key
        self.model = model
        self.retries = retries
        self.backoff_s = backoff_s
        self._sleep = sleep
        self.attempts = 0
        self._client = httpx.Client(
            base_url=endpoint,
            headers=headers,
            timeout=timeout_ms / 1000.0,
            transport=transport,
        )

    def _payload(self, request):
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": request.rendered_prompt}],
            "max_tokens": request.max_output_tokens,
            "temperature": request.decode_temperature,
        }
        if request.want_logprobs:
            payload["logprobs"] = True
        return payload

    def _decode(self, http_response, request, latency_ms):
        try:
            body = http_response.json()
            choice = body["choices"][0]
            text = choice["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as err:
            raise MalformedBackendReply("not a chat completion: " + str(err))
        if not isinstance(text, str):
            raise MalformedBackendReply("completion content is not text")

        logprobs = None
        try:
            content = (choice.get("logprobs") or {}).get("content")
            if content:
                # servers occasionally report tiny positive values
                logprobs = tuple(min(0.0, float(tok["logprob"])) for tok in content)
        except (KeyError, TypeError, ValueError, AttributeError) as err:
            raise MalformedBackendReply("unreadable logprobs: " + str(err))

        response = ChatResponse(text, logprobs, self.name, latency_ms)
        if request.want_logprobs and logprobs is None:
            raise LogprobsUnavailable(response)
        return response

    def _complete(self, request):
        payload = self._payload(request)
        last_error = "no attempt made"
        for attempt in range(1, self.retries + 1):
            with self._lock:
                self.attempts += 1
            t0 = time.monotonic()
            try:
                http_response = self._client.post("/chat/completions", json=payload)
            except httpx.TransportError as err:
                last_error = type(err).__name__ + ": " + str(err)
            else:
                status = http_response.status_code
                if status == 429 or status >= 500:
                    last_error = "HTTP " + str(status)
                elif status >= 400:
                    raise InvalidRequest(
                        "backend rejected the request with HTTP " + str(status)
                    )
                else:
                    latency = int((time.monotonic() - t0) * 1000)
                    return self._decode(http_response, request, latency)

            logger.warning(
                "backend attempt %d/%d failed: %s", attempt, self.retries, last_error
            )
            if attempt < self.retries:
                self._sleep(self.backoff_s * 2 ** (attempt - 1))

        raise BackendUnreachable(
            "backend unreachable after " + str(self.retries) + " attempts: " + last_error
        )

    def close(self):
        self._client.close()


def make_backend(backend_params, environ=None):
    """
    Builds the configured backend

    Parameters
    ----------
    backend_params : dict
        checked backend settings
    environ : dict, optional
        environment holding the API key (defaults to os.environ)

    Returns
    -------
    ChatBackend
    """

    if backend_params["kind"] == "mock":
        return MockBackend(backend_params["mock_script"])

    if environ is None:
        environ = os.environ
    api_key = environ.get(backend_params["api_key_env"])
    if not api_key:
        logger.info(
            "no API key in %s, sending unauthenticated requests",
            backend_params["api_key_env"],
        )
    return HTTPBackend(
        endpoint=backend_params["endpoint"],
        model=backend_params["model"],
        api_key=api_key,
        timeout_ms=backend_params["timeout_ms"],
        retries=backend_params["retries"],
        backoff_s=backend_params["backoff_s"],
    )


# json extraction

_FENCE = re.compile(r"^[ \t]*```[A-Za-z]*[ \t]*$", re.M)


def extract_json(text):
    """
    Parses the first JSON object embedded in a reply

    Code fences and surrounding prose are tolerated.

    Raises
    ------
    NoJsonFound
        if the text holds no "{" at all
    InvalidJson
        if no "{" starts a parseable object
    """

    if not text or "{" not in text:
        raise NoJsonFound("reply contains no JSON object")

    stripped = _FENCE.sub("", text)
    decoder = json.JSONDecoder()
    error = None
    for match in re.finditer(r"\{", stripped):
        try:
            obj, _ = decoder.raw_decode(stripped, match.start())
        except json.JSONDecodeError as err:
            if error is None:
                error = err
            continue
        if isinstance(obj, dict):
            return obj

    raise InvalidJson("reply holds no parseable JSON object: " + str(error))
