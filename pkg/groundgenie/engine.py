"""
Automatic annotation data engine: image caption, noun phrases, phrase
grounding, phrase-conditioned region captions and referring rewrites, each
stage served by a pluggable client.

Images are processed concurrently; stages within an image run in order.
Output is written in manifest order and checkpointed after every image, so
an interrupted run resumes to the same output a clean run produces.
"""
import hashlib
import logging
import os
import re
import threading
from abc import ABC, abstractmethod
from collections import OrderedDict, namedtuple
from concurrent.futures import ThreadPoolExecutor

import requests

from .digest import file_checksum, record_digest
from .engine_presets import DEFAULT_PRESET, get_preset
from .exceptions import ConfigError, GroundgenieError, StageError
from .geometry import Box, Extent, clip_box
from .io_formats import TRIPLET_KIND, append_records, read_manifest, read_records, write_records

__all__ = ["PhraseSpan", "CaptionResult", "Verdict", "Region", "AnnotationTriplet", "StageClient",
           "MockStageClient", "HttpStageClient", "RecordingStageClient", "ReplayStageClient", "EngineSettings",
           "RunReport", "load_lexicon", "extract_noun_phrases", "filter_abstract", "ground_phrases",
           "phrase_conditioned_caption", "verify_and_rewrite", "is_one_sentence",
           "validate_referring", "image_passes", "build_client", "run_pipeline", "CAPABILITIES",
           "DEFAULT_BLOCKLIST", "KEEP_ALL", "KEEP_BEST"]

_LOGGER = logging.getLogger(__name__)

CAPTION = "caption"
GROUND = "ground"
REGION_CAPTION = "region_caption"
VERIFY_REWRITE = "verify_rewrite"
CAPABILITIES = [CAPTION, GROUND, REGION_CAPTION, VERIFY_REWRITE]
ENDPOINTS = {c: "/" + c for c in CAPABILITIES}

CATEGORY_NAME = "category"
DESCRIPTIVE = "descriptive"
DESCRIPTIVE_MIN_WORDS = 3

KEEP_ALL = "all"
KEEP_BEST = "best"

ACCEPT = "accept"
REJECT = "reject"
REFERRING_MIN_WORDS = 5
REFERRING_MAX_WORDS = 10

MOCK_CLIENT = "mock"
HTTP_CLIENT = "http"
REPLAY_CLIENT = "replay"
CLIENT_KINDS = [MOCK_CLIENT, HTTP_CLIENT, REPLAY_CLIENT]

DEFAULT_BLOCKLIST = ("image", "background", "picture", "scene", "view", "photo", "foreground",
                     "atmosphere")
LEXICON_FILE = os.path.join(os.path.dirname(__file__), "closed_class_words.txt")
CHECKPOINT_SUFFIX = ".ckpt"
CHECKPOINT_KIND = "checkpoint"
STATUS_OK = "ok"
STATUS_FAILED = "failed"
STATUS_SKIPPED = "skipped"

COUNT_KEYS = ["images", "images_skipped", "images_failed", "extracted", "filtered", "kept",
              "grounded", "ungrounded", "captioned", "flagged", "accepted", "rejected"]

_WORD_RE = re.compile(r"[A-Za-z0-9]+(?:[-'][A-Za-z0-9]+)*")
_SENTENCE_END_RE = re.compile(r"[.!?]+(?=\s|$)")

PhraseSpan = namedtuple("PhraseSpan", ["text", "start", "end", "kind"])
CaptionResult = namedtuple("CaptionResult", ["text", "valid", "reason"])
Verdict = namedtuple("Verdict", ["accepted", "referring", "reason"])


class Region(namedtuple("Region", ["box", "phrase", "kind", "score", "detail", "referring",
                                   "provenance"])):
    """ One grounded phrase with the region texts gathered for it """
    __slots__ = ()

    def to_dict(self):
        return OrderedDict([("box", list(self.box)), ("phrase", self.phrase),
                            ("kind", self.kind), ("score", self.score), ("detail", self.detail),
                            ("referring", self.referring), ("provenance", list(self.provenance))])

    @classmethod
    def from_dict(cls, d):
        return cls(Box(*d["box"]), d["phrase"], d["kind"], d.get("score"), d.get("detail"),
                   d.get("referring"), tuple(d.get("provenance", ())))


class AnnotationTriplet(namedtuple("AnnotationTriplet", ["id", "uri", "caption", "regions"])):
    """ Image caption, region boxes and region texts of one image """
    __slots__ = ()

    def to_dict(self):
        return OrderedDict([("id", self.id), ("uri", self.uri), ("caption", self.caption),
                            ("regions", [r.to_dict() for r in self.regions])])

    @classmethod
    def from_dict(cls, d):
        return cls(d["id"], d.get("uri"), d["caption"], [Region.from_dict(r) for r in d["regions"]])


def load_lexicon(path=LEXICON_FILE):
    """
    Read a closed-class word list: one word per line, '#' comments allowed.

    :param str path: word list file; the bundled list by default
    :return frozenset[str]: lowercase words
    """
    with open(path, encoding="utf-8") as f:
        return frozenset(l.strip().lower() for l in f if l.strip() and not l.startswith("#"))


_DEFAULT_LEXICON = None


def _default_lexicon():
    global _DEFAULT_LEXICON
    if _DEFAULT_LEXICON is None:
        _DEFAULT_LEXICON = load_lexicon()
    return _DEFAULT_LEXICON


def _kind(text):
    return DESCRIPTIVE if len(text.split()) >= DESCRIPTIVE_MIN_WORDS else CATEGORY_NAME


def extract_noun_phrases(caption, lexicon=None):
    """
    Chunk a caption into noun phrases: maximal runs of words that are not
    closed-class words and are separated by whitespace only. Punctuation and
    closed-class words end a phrase and are not part of it.

    :param str caption: image caption
    :param Iterable[str] lexicon: closed-class words; the bundled list when None
    :return list[PhraseSpan]: phrases with character offsets into the caption
    """
    if not caption or not caption.strip():
        raise GroundgenieError("Cannot extract phrases from an empty caption")
    lexicon = _default_lexicon() if lexicon is None else frozenset(w.lower() for w in lexicon)
    spans, start, end = [], None, None
    for m in _WORD_RE.finditer(caption):
        closed = m.group(0).lower() in lexicon
        joined = start is not None and not caption[end:m.start()].strip()
        if closed or not joined:
            if start is not None:
                spans.append((start, end))
            start = None
        if not closed:
            start = m.start() if start is None else start
            end = m.end()
    if start is not None:
        spans.append((start, end))
    return [PhraseSpan(caption[s:e], s, e, _kind(caption[s:e])) for s, e in spans]


def filter_abstract(phrases, blocklist=DEFAULT_BLOCKLIST):
    """
    Drop phrases whose head word, the last word, names something abstract.

    :param list[PhraseSpan] phrases: extracted phrases
    :param Iterable[str] blocklist: abstract head words
    :return list[PhraseSpan]: remaining phrases in order
    """
    blocked = {w.lower() for w in (blocklist or ())}
    if not blocked:
        return list(phrases)
    return [p for p in phrases if p.text.split()[-1].lower() not in blocked]


def is_one_sentence(text):
    """ One terminal punctuation mark, at the end of the text """
    text = (text or "").strip()
    return bool(text) and len(_SENTENCE_END_RE.findall(text)) == 1 and text[-1] in ".!?"


def validate_referring(text):
    """
    :param str text: referring expression
    :return str: None when valid, else the reason
    """
    if not text or not text.strip():
        return "empty"
    if "," in text:
        return "contains a comma"
    n = len(text.split())
    if not REFERRING_MIN_WORDS < n < REFERRING_MAX_WORDS:
        return "{} words, expected more than {} and less than {}".format(
            n, REFERRING_MIN_WORDS, REFERRING_MAX_WORDS)
    return None


class StageClient(ABC):
    """
    Serves stage requests. A request is ``{"capability": ..., "payload": ...}``
    and a response is ``{"status": "ok" | "error", "payload": ...}``.
    """

    name = None

    @abstractmethod
    def request(self, capability, payload):
        """
        :param str capability: one of CAPABILITIES
        :param Mapping payload: request payload
        :return Mapping: response record
        :raise StageError: the call failed
        """
        pass

    def close(self):
        pass


def _digest_bytes(*parts):
    return hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()


class MockStageClient(StageClient):
    """
    Deterministic stand-in for every capability. Responses are drawn from
    small vocabularies with a hash of the request, so equal requests get
    equal responses. ``overrides`` maps a capability to a fixed response
    payload or to a callable taking the request payload.
    """

    name = MOCK_CLIENT

    SUBJECTS = ["soldier", "woman", "man", "dog", "cyclist", "child", "chef", "vendor"]
    ATTIRE = ["military-style uniform", "red rain jacket", "striped wool sweater", "long blue coat",
              "white apron"]
    OBJECTS = ["wooden bench", "silver car", "brick wall", "fruit stall", "street lamp", "old bicycle"]
    SETTINGS = ["sunny sky", "busy street", "green hedge", "stone bridge"]
    ADJECTIVES = ["bright", "small", "tall", "dark", "faded", "weathered", "shiny", "worn"]
    POSITIONS = ["left", "right", "center", "upper left", "lower right"]

    def __init__(self, overrides=None):
        self.overrides = dict(overrides or {})
        unknown = set(self.overrides) - set(CAPABILITIES)
        if unknown:
            raise ConfigError("Unknown capabilities in mock overrides: {}".format(", ".join(sorted(unknown))))

    def request(self, capability, payload):
        if capability not in CAPABILITIES:
            raise StageError(capability, "unsupported capability")
        if capability in self.overrides:
            o = self.overrides[capability]
            return {"status": "ok", "payload": o(payload) if callable(o) else o}
        return {"status": "ok", "payload": getattr(self, "_" + capability)(payload)}

    @staticmethod
    def _pick(seq, byte):
        return seq[byte % len(seq)]

    def _caption(self, payload):
        d = _digest_bytes("caption", payload["image"]["id"])
        subject, attire = self._pick(self.SUBJECTS, d[0]), self._pick(self.ATTIRE, d[1])
        obj, setting = self._pick(self.OBJECTS, d[2]), self._pick(self.SETTINGS, d[3])
        if d[4] % 2:
            text = "A {} in a {} stands next to a {} in the image.".format(subject, attire, obj)
        else:
            text = "A {} wearing a {} walks past a {} with a {} in the background.".format(
                subject, attire, obj, setting)
        return {"caption": text}

    def _ground(self, payload):
        img = payload["image"]
        w, h = float(img["width"]), float(img["height"])
        d = _digest_bytes("ground", img["id"], payload["phrase"])
        boxes = []
        for k in range(1 + d[0] % 2):
            b = d[1 + 5 * k:6 + 5 * k]
            x0, y0 = b[0] / 255.0 * 0.6 * w, b[1] / 255.0 * 0.6 * h
            bw, bh = (0.1 + b[2] / 255.0 * 0.3) * w, (0.1 + b[3] / 255.0 * 0.3) * h
            boxes.append({"box": [round(x0, 2), round(y0, 2), round(min(x0 + bw, w), 2),
                                  round(min(y0 + bh, h), 2)],
                          "score": round(0.15 + b[4] / 255.0 * 0.85, 4)})
        return {"boxes": boxes}

    def _region_caption(self, payload):
        phrase = payload["phrase"]
        d = _digest_bytes("region", payload["image"]["id"], phrase, payload["box"])
        text = "The {} is in the {} part of the picture and looks {}.".format(
            phrase, self._pick(self.POSITIONS, d[0]), self._pick(self.ADJECTIVES, d[1]))
        if d[2] % 7 == 0:
            text = text[:-1] + ". It is partly hidden."
        return {"caption": text}

    def _verify_rewrite(self, payload):
        phrase = payload["phrase"]
        d = _digest_bytes("rewrite", payload["caption"], phrase)
        if d[0] % 5 == 0:
            return {"verdict": REJECT, "referring": None}
        referring = "the {} {} on the {} side".format(
            self._pick(self.ADJECTIVES, d[1]), phrase, self._pick(["left", "right"], d[2]))
        return {"verdict": ACCEPT, "referring": referring}


class HttpStageClient(StageClient):
    """ Posts request records to ``<base_url>/<capability>`` """

    name = HTTP_CLIENT

    def __init__(self, base_url, timeout=30.0, session=None):
        if not base_url:
            raise ConfigError("HTTP stage client needs an endpoint base URL")
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.session = session or requests.Session()

    def request(self, capability, payload):
        url = self.base_url + ENDPOINTS[capability]
        try:
            r = self.session.post(url, json={"capability": capability, "payload": payload},
                                  timeout=self.timeout)
            r.raise_for_status()
            body = r.json()
        except requests.RequestException as e:
            raise StageError(capability, "request to {} failed: {}".format(url, e))
        except ValueError:
            raise StageError(capability, "response from {} is not JSON".format(url))
        return body

    def close(self):
        self.session.close()


class RecordingStageClient(StageClient):
    """
    Wraps a client and keeps every request/response pair, keyed by the
    request digest. Records are written, sorted by key, on close().
    """

    def __init__(self, inner, path):
        self.inner = inner
        self.path = path
        self.name = inner.name
        self._records = {}
        self._lock = threading.Lock()

    def request(self, capability, payload):
        req = OrderedDict([("capability", capability), ("payload", payload)])
        response = self.inner.request(capability, payload)
        with self._lock:
            self._records[record_digest(req)] = (req, response)
        return response

    def close(self):
        self.inner.close()
        write_records((OrderedDict([("key", k), ("request", v[0]), ("response", v[1])])
                       for k, v in sorted(self._records.items())), self.path, "stage-log")
        _LOGGER.info("Recorded {} stage call(s) to: {}".format(len(self._records), self.path))


class ReplayStageClient(StageClient):
    """ Answers from a file written by RecordingStageClient """

    name = REPLAY_CLIENT

    def __init__(self, path):
        self.path = path
        self._responses = {r["key"]: r["response"] for r in read_records(path, "stage-log")}

    def request(self, capability, payload):
        key = record_digest(OrderedDict([("capability", capability), ("payload", payload)]))
        try:
            return self._responses[key]
        except KeyError:
            raise StageError(capability, "no recorded response for request {}".format(key))


def _call(client, capability, payload, retries=0, image_id=None):
    """ Call a stage, retrying failed calls; returns the response payload """
    attempts, last = 0, None
    while attempts <= retries:
        attempts += 1
        try:
            response = client.request(capability, payload)
            if not isinstance(response, dict):
                raise StageError(capability, "response is not an object: {!r}".format(response))
            if response.get("status") != "ok":
                raise StageError(capability, "client reported: {}".format(
                    response.get("payload") or response.get("status")))
            body = response.get("payload") or {}
            if not isinstance(body, dict):
                raise StageError(capability, "response payload is not an object: {!r}".format(body))
            return body
        except (StageError, requests.RequestException) as e:
            last = e
            _LOGGER.debug("Attempt {} of {} for {} failed: {}".format(attempts, retries + 1, capability, e))
    reason = last.reason if isinstance(last, StageError) else str(last)
    raise StageError(capability, reason, image_id, attempts)


def _text(res, key, capability, image_id=None):
    """ String field of a stage response, stripped; missing or null gives an empty string """
    value = res.get(key)
    if value is None:
        return ""
    if not isinstance(value, str):
        raise StageError(capability, "'{}' must be text, got: {!r}".format(key, value), image_id)
    return value.strip()


def _image_payload(image):
    return OrderedDict([("id", image.id), ("uri", image.uri), ("width", image.width),
                        ("height", image.height)])


def ground_phrases(image, phrases, client, threshold=0.3, keep=KEEP_ALL, retries=0, diagnostics=None):
    """
    Ground each phrase with the grounding client. Boxes scoring above the
    threshold are kept (all of them, or the best one), clipped to the image.
    Phrases left without a box are dropped with a diagnostic.

    :param ManifestRecord image: image
    :param list[PhraseSpan] phrases: filtered phrases
    :param StageClient client: grounding client
    :param float threshold: minimal score, exclusive
    :param str keep: 'all' or 'best'
    :param int retries: extra attempts per call
    :param list diagnostics: receives (phrase, message) for dropped phrases
    :return list[(PhraseSpan, Box, float)]: grounded boxes in phrase order
    """
    if keep not in (KEEP_ALL, KEEP_BEST):
        raise ConfigError("Unknown keep policy: {}".format(keep))
    extent = Extent(image.width, image.height)
    out = []
    for p in phrases:
        payload = OrderedDict([("image", _image_payload(image)), ("phrase", p.text)])
        found = _call(client, GROUND, payload, retries, image.id).get("boxes") or []
        if not isinstance(found, list):
            raise StageError(GROUND, "'boxes' must be a list, got: {!r}".format(found), image.id)
        hits = []
        for cand in found:
            try:
                if not isinstance(cand, dict):
                    raise TypeError("box entry is not an object: {!r}".format(cand))
                box = clip_box(Box(*cand["box"]), extent)
                score = float(cand.get("score", 0.0))
            except (GroundgenieError, KeyError, TypeError, ValueError) as e:
                _LOGGER.warning("Ignoring malformed box for '{}' in {}: {}".format(p.text, image.id, e))
                continue
            if score > threshold:
                hits.append((p, box, score))
        if keep == KEEP_BEST and hits:
            hits = [max(hits, key=lambda x: x[2])]
        if not hits:
            msg = "no box above {}".format(threshold)
            _LOGGER.debug("Dropping phrase '{}' in {}: {}".format(p.text, image.id, msg))
            if diagnostics is not None:
                diagnostics.append((p.text, msg))
        out.extend(hits)
    return out


def phrase_conditioned_caption(image, box, phrase, client, prompt=None, retries=0):
    """
    Describe a region given its grounded phrase.

    :param ManifestRecord image: image
    :param Box box: region
    :param str phrase: grounded phrase
    :param StageClient client: region caption client
    :param str prompt: template with a '{phrase}' field
    :return CaptionResult: caption; valid is False unless it is one sentence
    """
    if not phrase or not phrase.strip():
        raise GroundgenieError("Region phrase must not be empty")
    prompt = prompt or get_preset(DEFAULT_PRESET)["region_prompt"]
    payload = OrderedDict([("image", _image_payload(image)), ("box", [round(c, 2) for c in box]),
                           ("phrase", phrase), ("prompt", prompt.format(phrase=phrase))])
    text = _text(_call(client, REGION_CAPTION, payload, retries, image.id), "caption", REGION_CAPTION, image.id)
    if is_one_sentence(text):
        return CaptionResult(text, True, None)
    return CaptionResult(text, False, "not a single sentence")


def verify_and_rewrite(caption, phrase, client, prompt=None, retries=0, image_id=None):
    """
    Verify a region caption against its phrase and rewrite it into a short
    referring expression: more than 5 and less than 10 words, no commas.

    :param str caption: detailed region caption
    :param str phrase: grounded phrase
    :param StageClient client: verify/rewrite client
    :param str prompt: template with '{caption}' and '{phrase}' fields
    :return Verdict: accepted expression or the rejection reason
    """
    prompt = prompt or get_preset(DEFAULT_PRESET)["rewrite_prompt"]
    payload = OrderedDict([("caption", caption), ("phrase", phrase),
                           ("prompt", prompt.format(caption=caption, phrase=phrase))])
    res = _call(client, VERIFY_REWRITE, payload, retries, image_id)
    if res.get("verdict") != ACCEPT:
        return Verdict(False, None, "rejected by verifier")
    referring = _text(res, "referring", VERIFY_REWRITE, image_id)
    reason = validate_referring(referring)
    if reason:
        _LOGGER.debug("Rejecting referring expression '{}': {}".format(referring, reason))
        return Verdict(False, None, reason)
    return Verdict(True, referring, None)


class EngineSettings(namedtuple("EngineSettings", [
        "preset", "client", "endpoint", "replay", "record", "score_threshold", "keep", "retries",
        "timeout", "jobs", "min_width", "min_height", "allow_tags", "deny_tags", "blocklist"])):
    """ Validated data engine settings """
    __slots__ = ()

    DEFAULTS = OrderedDict([
        ("preset", DEFAULT_PRESET), ("client", MOCK_CLIENT), ("endpoint", None), ("replay", None),
        ("record", None), ("score_threshold", 0.3), ("keep", KEEP_ALL), ("retries", 2),
        ("timeout", 30.0), ("jobs", 1), ("min_width", 0), ("min_height", 0), ("allow_tags", ()),
        ("deny_tags", ()), ("blocklist", DEFAULT_BLOCKLIST)])

    @classmethod
    def from_mapping(cls, m=None, **kwargs):
        """
        :param Mapping m: settings; missing keys take defaults
        :raise ConfigError: unknown keys or invalid values
        """
        values = OrderedDict(cls.DEFAULTS)
        given = dict(m or {})
        given.update({k: v for k, v in kwargs.items() if v is not None})
        unknown = set(given) - set(values)
        if unknown:
            raise ConfigError("Unknown engine settings: {}".format(", ".join(sorted(unknown))))
        values.update(given)
        for k in ("allow_tags", "deny_tags", "blocklist"):
            values[k] = tuple(values[k] or ())
        s = cls(**values)
        try:
            get_preset(s.preset)
        except KeyError as e:
            raise ConfigError(e.args[0])
        if s.client not in CLIENT_KINDS:
            raise ConfigError("Unknown client '{}'; choose from: {}".format(s.client, ", ".join(CLIENT_KINDS)))
        if s.client == HTTP_CLIENT and not s.endpoint:
            raise ConfigError("The http client needs an endpoint")
        if s.client == REPLAY_CLIENT and not s.replay:
            raise ConfigError("The replay client needs a recorded stage log")
        if s.keep not in (KEEP_ALL, KEEP_BEST):
            raise ConfigError("keep must be '{}' or '{}'".format(KEEP_ALL, KEEP_BEST))
        if s.retries < 0 or s.jobs < 1 or s.timeout <= 0:
            raise ConfigError("retries must be >= 0, jobs >= 1 and timeout > 0")
        return s

    def echo(self):
        return OrderedDict((k, list(v) if isinstance(v, tuple) else v) for k, v in self._asdict().items())


def build_client(settings):
    """
    :param EngineSettings settings: engine settings
    :return StageClient: client serving every capability
    """
    if settings.client == MOCK_CLIENT:
        client = MockStageClient()
    elif settings.client == HTTP_CLIENT:
        client = HttpStageClient(settings.endpoint, settings.timeout)
    else:
        client = ReplayStageClient(settings.replay)
    if settings.record:
        client = RecordingStageClient(client, settings.record)
    return client


def image_passes(image, settings):
    """ Manifest predicates: minimal resolution, allowed and denied tags """
    if image.width < settings.min_width or image.height < settings.min_height:
        return False
    tags = set(image.tags or ())
    if settings.allow_tags and not tags.intersection(settings.allow_tags):
        return False
    return not tags.intersection(settings.deny_tags)


def _new_counts():
    return OrderedDict((k, 0) for k in COUNT_KEYS)


def _annotate(image, settings, clients, lexicon):
    """ Run every stage on one image; returns (triplet or None, counts, error) """
    counts = _new_counts()
    counts["images"] = 1
    if not image_passes(image, settings):
        counts["images_skipped"] = 1
        return None, counts, None
    preset = get_preset(settings.preset)
    try:
        if preset["caption_source"] == "manifest":
            if not (image.caption or "").strip():
                raise StageError(CAPTION, "manifest record has no conversation text", image.id)
            caption = image.caption
        else:
            payload = OrderedDict([("image", _image_payload(image)), ("prompt", preset["caption_prompt"])])
            caption = _text(_call(clients[CAPTION], CAPTION, payload, settings.retries, image.id),
                            "caption", CAPTION, image.id)
            if not caption:
                raise StageError(CAPTION, "empty caption", image.id)
        spans = extract_noun_phrases(caption, lexicon)
        kept = filter_abstract(spans, settings.blocklist)
        seen, unique = set(), []
        for p in kept:
            if p.text.lower() not in seen:
                seen.add(p.text.lower())
                unique.append(p)
        counts["extracted"], counts["filtered"], counts["kept"] = len(spans), len(spans) - len(kept), len(unique)
        dropped = []
        grounded = ground_phrases(image, unique, clients[GROUND], settings.score_threshold, settings.keep,
                                  settings.retries, dropped)
        counts["grounded"], counts["ungrounded"] = len(grounded), len(dropped)
        regions = []
        for span, box, score in grounded:
            provenance = ["extract", GROUND]
            detail = referring = None
            cap = phrase_conditioned_caption(image, box, span.text, clients[REGION_CAPTION],
                                             preset["region_prompt"], settings.retries)
            if cap.valid:
                counts["captioned"] += 1
                detail = cap.text
                provenance.append(REGION_CAPTION)
                verdict = verify_and_rewrite(detail, span.text, clients[VERIFY_REWRITE],
                                             preset["rewrite_prompt"], settings.retries, image.id)
                if verdict.accepted:
                    counts["accepted"] += 1
                    referring = verdict.referring
                    provenance.append(VERIFY_REWRITE)
                else:
                    counts["rejected"] += 1
            else:
                counts["flagged"] += 1
                _LOGGER.warning("Flagged region caption for '{}' in {}: {}".format(
                    span.text, image.id, cap.reason))
            regions.append(Region(box, span.text, span.kind, score, detail, referring, tuple(provenance)))
    except StageError as e:
        _LOGGER.warning("Skipping image {}: {}".format(image.id, e))
        failed = _new_counts()
        failed["images"], failed["images_failed"] = 1, 1
        return None, failed, str(e)
    return AnnotationTriplet(image.id, image.uri, caption, regions), counts, None


class RunReport(object):
    """ Stage counts, settings echo and output digest of one engine run """

    def __init__(self, counts, output, digest, complete, errors, config):
        self.counts = counts
        self.output = output
        self.digest = digest
        self.complete = complete
        self.errors = errors
        self.config = config

    def to_dict(self):
        return OrderedDict([("output", self.output), ("complete", self.complete),
                            ("digest", self.digest), ("counts", self.counts),
                            ("errors", [OrderedDict([("id", i), ("error", m)]) for i, m in self.errors]),
                            ("config", self.config)])

    def render(self):
        lines = ["output: {}".format(self.output), "complete: {}".format("yes" if self.complete else "no"),
                 "digest: {}".format(self.digest)]
        lines += ["{}: {}".format(k, v) for k, v in self.counts.items()]
        lines += ["failed {}: {}".format(i, m) for i, m in self.errors]
        return "\n".join(lines) + "\n"


def _load_checkpoint(out_path, ckpt_path):
    """
    Restore completed images and rewrite the output to the checkpointed
    prefix; lines written after the last checkpoint entry are dropped.
    """
    if not os.path.exists(ckpt_path):
        for p in (out_path, ckpt_path):
            if os.path.exists(p):
                os.remove(p)
        return []
    entries = read_records(ckpt_path, CHECKPOINT_KIND, drop_torn=True)
    done_ok = {e["id"] for e in entries if e["status"] == STATUS_OK}
    triplets = read_records(out_path, TRIPLET_KIND, drop_torn=True) if os.path.exists(out_path) else []
    kept = [t for t in triplets if t["id"] in done_ok]
    have = {t["id"] for t in kept}
    entries = [e for e in entries if e["status"] != STATUS_OK or e["id"] in have]
    write_records(kept, out_path, TRIPLET_KIND)
    write_records(entries, ckpt_path, CHECKPOINT_KIND)
    return entries


def run_pipeline(manifest, out_path, settings=None, clients=None, resume=False, limit=None, lexicon=None):
    """
    Annotate every image of a manifest and persist one triplet per image.

    :param manifest: manifest path or list of ManifestRecord
    :param str out_path: triplet file; the checkpoint is written next to it
    :param EngineSettings settings: engine settings
    :param clients: StageClient for all capabilities or a mapping capability -> client;
        built from the settings when None
    :param bool resume: continue from the checkpoint instead of starting over
    :param int limit: stop after this many images in this call
    :param Iterable[str] lexicon: closed-class words for phrase extraction
    :return RunReport: counts, digest and settings echo
    :raise FormatError: unreadable manifest
    """
    settings = settings or EngineSettings.from_mapping()
    images = read_manifest(manifest) if isinstance(manifest, str) else list(manifest)
    own_client = clients is None
    if own_client:
        clients = build_client(settings)
    if isinstance(clients, StageClient):
        clients = {c: clients for c in CAPABILITIES}
    missing = [c for c in CAPABILITIES if c not in clients]
    if missing:
        raise ConfigError("No client bound for: {}".format(", ".join(missing)))
    ckpt_path = out_path + CHECKPOINT_SUFFIX
    entries = _load_checkpoint(out_path, ckpt_path) if resume else []
    if not resume:
        for p in (out_path, ckpt_path):
            if os.path.exists(p):
                os.remove(p)
    done = {e["id"] for e in entries}
    counts = _new_counts()
    for e in entries:
        for k, v in e["counts"].items():
            counts[k] += v
    errors = [(e["id"], e["error"]) for e in entries if e["status"] == STATUS_FAILED]
    todo = [i for i in images if i.id not in done]
    if limit is not None:
        todo = todo[:limit]
    _LOGGER.info("Annotating {} image(s), {} already done".format(len(todo), len(done)))
    append_records([], out_path, TRIPLET_KIND)
    append_records([], ckpt_path, CHECKPOINT_KIND)
    try:
        with ThreadPoolExecutor(max_workers=settings.jobs) as executor:
            results = executor.map(lambda img: _annotate(img, settings, clients, lexicon), todo)
            for image, (triplet, image_counts, error) in zip(todo, results):
                if triplet is not None:
                    append_records([triplet.to_dict()], out_path, TRIPLET_KIND)
                status = STATUS_OK if triplet is not None else STATUS_FAILED if error else STATUS_SKIPPED
                append_records([OrderedDict([("id", image.id), ("status", status), ("counts", image_counts),
                                             ("error", error)])], ckpt_path, CHECKPOINT_KIND)
                for k, v in image_counts.items():
                    counts[k] += v
                if error:
                    errors.append((image.id, error))
    finally:
        if own_client:
            for c in set(clients.values()):
                c.close()
    complete = len(done) + len(todo) >= len({i.id for i in images})
    report = RunReport(counts, out_path, file_checksum(out_path), complete, errors, settings.echo())
    _LOGGER.info("Engine run {}: {} image(s), {} region(s), {} referring expression(s)".format(
        "complete" if complete else "interrupted", counts["images"], counts["grounded"], counts["accepted"]))
    return report
