"""Chat-with-images client with transcript record/replay.

The live path speaks the chat-completions JSON dialect over HTTP; a
recorded transcript replays byte-identically so every advisor-dependent
pipeline stage is testable offline. Requests are identified by a digest
over template id, message text, and image content hashes.
"""

import base64
import hashlib
import io
import json
import os
import re
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import requests
from PIL import Image

from .errors import (
    ConfigError,
    ExtractError,
    ReplayMismatchError,
    TemplateError,
    TransportError,
)

ENV_BASE_URL = "VER_LLM_BASE_URL"
ENV_API_KEY = "VER_LLM_API_KEY"
ENV_MODEL = "VER_LLM_MODEL"

TEMPLATE_DIR = Path(__file__).parent / "templates"


def image_hash(array):
    """Stable content hash of an image array (shape + float64 pixels)."""
    arr = np.ascontiguousarray(np.asarray(array), dtype="<f8")
    h = hashlib.sha256()
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def encode_image_png(array):
    """Deterministic 8-bit grayscale PNG (base64) of a 2-D array."""
    arr = np.asarray(array, dtype=float)
    lo, hi = float(arr.min()), float(arr.max())
    scale = 255.0 / (hi - lo) if hi > lo else 1.0
    img = Image.fromarray(((arr - lo) * scale).astype(np.uint8), mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


@dataclass
class ChatMessage:
    role: str
    text: str
    images: tuple = ()
    template_id: str = None

    def image_hashes(self):
        return [image_hash(img) for img in self.images]


def request_digest(messages):
    """Order-sensitive digest over template id, texts, and image hashes."""
    payload = [[m.template_id, m.role, m.text, m.image_hashes()]
               for m in messages]
    return hashlib.sha256(
        json.dumps(payload, sort_keys=False).encode()).hexdigest()


# ---------------------------------------------------------------------------
# transcripts
# ---------------------------------------------------------------------------

@dataclass
class Transcript:
    """Ordered (request digest, response) pairs for record/replay."""

    entries: list = field(default_factory=list)

    def append(self, digest, template_id, response):
        self.entries.append({"digest": digest, "template_id": template_id,
                             "response": response})

    def save(self, path):
        with open(path, "w") as fh:
            for entry in self.entries:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        entries = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    entries.append(json.loads(line))
        return cls(entries=entries)


# ---------------------------------------------------------------------------
# client
# ---------------------------------------------------------------------------

class ChatClient:
    """Chat endpoint with three modes.

    live    -- HTTP requests against the configured service.
    record  -- like live (or a supplied ``backend`` callable) but appends
               every (digest, response) pair to a transcript.
    replay  -- answers from a recorded transcript; any digest drift fails
               loudly with ReplayMismatchError.

    ``backend`` swaps the transport for a callable(messages) -> text,
    which is how deterministic scripted advisors are recorded.
    """

    TRANSIENT_STATUS = (429, 500, 502, 503, 504)

    def __init__(self, mode="live", transcript=None, base_url=None,
                 api_key=None, model=None, timeout=60.0, max_retries=3,
                 backoff=1.0, backend=None, session=None):
        if mode not in ("live", "record", "replay"):
            raise ConfigError(f"unknown client mode {mode!r}")
        self.mode = mode
        self.backend = backend
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self._session = session
        self._cursor = 0
        if mode == "replay":
            if transcript is None:
                raise ConfigError("replay mode requires a transcript")
            self.transcript = transcript
        else:
            self.transcript = transcript if transcript is not None else Transcript()
        if mode in ("live", "record") and backend is None:
            self.base_url = base_url or os.environ.get(ENV_BASE_URL)
            self.api_key = api_key or os.environ.get(ENV_API_KEY)
            self.model = model or os.environ.get(ENV_MODEL, "gpt-4o")
            if not self.base_url:
                raise ConfigError(f"{ENV_BASE_URL} is not configured")
            if not self.api_key:
                raise ConfigError(f"{ENV_API_KEY} is not configured")

    def chat(self, messages):
        """Send messages, return the assistant text."""
        digest = request_digest(messages)
        if self.mode == "replay":
            return self._replay(digest)
        text = (self.backend(messages) if self.backend is not None
                else self._post(messages))
        if self.mode == "record":
            template_id = next((m.template_id for m in messages
                                if m.template_id), None)
            self.transcript.append(digest, template_id, text)
        return text

    def _replay(self, digest):
        if self._cursor >= len(self.transcript.entries):
            raise ReplayMismatchError(
                f"transcript exhausted at call {self._cursor}",
                expected=None, actual=digest)
        entry = self.transcript.entries[self._cursor]
        if entry["digest"] != digest:
            raise ReplayMismatchError(
                f"digest mismatch at call {self._cursor}: "
                f"recorded {entry['digest'][:12]}.. got {digest[:12]}..",
                expected=entry["digest"], actual=digest)
        self._cursor += 1
        return entry["response"]

    def _post(self, messages):
        body = {"model": self.model,
                "messages": [self._wire_message(m) for m in messages]}
        url = self.base_url.rstrip("/") + "/chat/completions"
        headers = {"Authorization": f"Bearer {self.api_key}",
                   "Content-Type": "application/json"}
        post = (self._session or requests).post
        last_error = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = post(url, json=body, headers=headers,
                            timeout=self.timeout)
            except requests.RequestException as exc:
                last_error = f"transport failure: {exc}"
                continue
            if resp.status_code in self.TRANSIENT_STATUS:
                last_error = f"HTTP {resp.status_code}"
                continue
            if resp.status_code != 200:
                raise TransportError(
                    f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (KeyError, IndexError, ValueError) as exc:
                raise TransportError(f"malformed response: {exc}") from exc
        raise TransportError(f"giving up after {self.max_retries + 1} "
                             f"attempts; last error: {last_error}")

    @staticmethod
    def _wire_message(message):
        content = [{"type": "text", "text": message.text}]
        for img in message.images:
            content.append({
                "type": "image_url",
                "image_url": {"url": "data:image/png;base64,"
                                     + encode_image_png(img)}})
        return {"role": message.role, "content": content}


# ---------------------------------------------------------------------------
# delimiter extraction
# ---------------------------------------------------------------------------

def extract_delimited(text, open_tag, close_tag):
    """All innermost, non-overlapping spans between the tags, in order.

    Conventions used by the advisors: coordinates in <coord>x,y</coord>,
    libraries in <library>term, term</library>, decisions in
    <decision>...</decision>. Unbalanced tags raise ExtractError with the
    byte offset of the offending tag.
    """
    if not open_tag or not close_tag or open_tag == close_tag:
        raise ExtractError("tags must be nonempty and distinct")
    events = []
    for m in re.finditer(re.escape(open_tag), text):
        events.append((m.start(), m.end(), "open"))
    for m in re.finditer(re.escape(close_tag), text):
        events.append((m.start(), m.end(), "close"))
    events.sort()
    spans = []
    stack = []  # (content_start, has_children)
    for start, end, kind in events:
        if kind == "open":
            if stack:
                stack[-1] = (stack[-1][0], True)
            stack.append((end, False))
        else:
            if not stack:
                raise ExtractError(f"unmatched {close_tag!r}", offset=start)
            content_start, has_children = stack.pop()
            if not has_children:
                spans.append(text[content_start:start])
            if stack:
                stack[-1] = (stack[-1][0], True)
    if stack:
        raise ExtractError(f"unclosed {open_tag!r}",
                           offset=stack[0][0] - len(open_tag))
    return spans


def extract_one(text, tag):
    """The single <tag>...</tag> span, or None when absent."""
    spans = extract_delimited(text, f"<{tag}>", f"</{tag}>")
    return spans[0].strip() if spans else None


# ---------------------------------------------------------------------------
# prompt templates
# ---------------------------------------------------------------------------

_ROLE_RE = re.compile(r"^\[(system|user|assistant)\]\s*$")
_PLACEHOLDER_RE = re.compile(r"\{(image:)?([A-Za-z_][A-Za-z0-9_]*)\}")


def list_templates():
    return sorted(p.stem for p in TEMPLATE_DIR.glob("*.txt"))


def render_prompt(template_id, bindings, template_dir=None):
    """Instantiate a prompt template into a message list.

    Templates are text files with ``[role]`` section headers; ``{name}``
    substitutes a text binding, a line ``{image:name}`` attaches an image
    binding. Raises TemplateError naming any unbound placeholder.
    """
    path = Path(template_dir or TEMPLATE_DIR) / f"{template_id}.txt"
    if not path.exists():
        raise TemplateError(f"no template {template_id!r}")
    messages = []
    role, lines, images = None, [], []

    def flush():
        if role is not None:
            messages.append(ChatMessage(
                role=role, text="\n".join(lines).strip(),
                images=tuple(images),
                template_id=template_id if not messages else None))

    for line in path.read_text().splitlines():
        header = _ROLE_RE.match(line)
        if header:
            flush()
            role, lines, images = header.group(1), [], []
            continue
        if role is None:
            continue  # preamble comments before the first section
        image_only = _PLACEHOLDER_RE.fullmatch(line.strip())
        if image_only and image_only.group(1):
            name = image_only.group(2)
            if name not in bindings:
                raise TemplateError(f"unbound image placeholder {name!r}",
                                    placeholder=name)
            images.append(np.asarray(bindings[name]))
            continue

        def substitute(match):
            if match.group(1):
                raise TemplateError(
                    f"image placeholder {match.group(2)!r} must be alone "
                    f"on its line", placeholder=match.group(2))
            name = match.group(2)
            if name not in bindings:
                raise TemplateError(f"unbound placeholder {name!r}",
                                    placeholder=name)
            return str(bindings[name])

        lines.append(_PLACEHOLDER_RE.sub(substitute, line))
    flush()
    if not messages:
        raise TemplateError(f"template {template_id!r} has no sections")
    return messages
