"""Behavioral 2AFC rating backend: serves trials over HTTP, records human
choices in an append-only event log, and scores the session.

Every trial shows one reconstruction with two candidates (the true stimulus
and a seeded distractor, sides randomized per trial). The correct side lives
only in the server-side session file and never appears in any payload sent
to a client; raters identify themselves with a self-assigned token from
GET /api/session. A restarted service replays the event log, so recorded
choices survive crashes.
"""

from __future__ import annotations

import base64
import io
import json
import re
import secrets
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np
from PIL import Image

from . import model as md
from .errors import ContractError, ValidationError

SIDES = ("A", "B")


def png_payload(pixels):
    """Base64 PNG of a CxHxW [0, 1] image (grayscale or RGB)."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    byte_img = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    if byte_img.shape[0] == 1:
        img = Image.fromarray(byte_img[0], mode="L")
    elif byte_img.shape[0] == 3:
        img = Image.fromarray(byte_img.transpose(1, 2, 0), mode="RGB")
    else:
        raise ValidationError(f"cannot encode {byte_img.shape[0]}-channel image")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return {"format": "png", "encoding": "base64", "data": base64.b64encode(buf.getvalue()).decode()}


@dataclass
class Trial:
    trial: int
    reconstruction: dict  # png payload
    candidate_a: dict
    candidate_b: dict
    correct: str  # "A" | "B", server-side only
    stimulus_id: str
    distractor_id: str

    def client_payload(self, n_trials):
        # exactly the public fields; the correct side must never leak
        return {
            "trial": self.trial,
            "n_trials": n_trials,
            "reconstruction": self.reconstruction,
            "candidate_a": self.candidate_a,
            "candidate_b": self.candidate_b,
        }


@dataclass
class RatingSession:
    session_id: str
    seed: int
    trials: list

    @property
    def n_trials(self):
        return len(self.trials)

    def to_dict(self):
        return {
            "version": 1,
            "session_id": self.session_id,
            "seed": self.seed,
            "n_trials": self.n_trials,
            "trials": [t.__dict__ for t in self.trials],
        }

    @staticmethod
    def from_dict(doc):
        if doc.get("version") != 1:
            raise ValidationError(f"unsupported session version {doc.get('version')}")
        trials = [Trial(**t) for t in doc["trials"]]
        return RatingSession(doc["session_id"], doc["seed"], trials)


def build_session(recons, stimuli, seed):
    """One trial per reconstruction: candidates are the paired stimulus and a
    seeded distractor drawn from the other stimuli, sides seeded-random."""
    if len(recons) == 0:
        raise ContractError("cannot build a rating session from an empty test set")
    if len(recons) != len(stimuli):
        raise ContractError("reconstruction/stimulus lists must align")
    if len(stimuli) < 2:
        raise ContractError("need at least 2 stimuli for distractors")
    rng = np.random.default_rng(seed)
    trials = []
    n = len(stimuli)
    for i, recon in enumerate(recons):
        j = int(rng.integers(0, n - 1))
        if j >= i:
            j += 1
        true_on_a = bool(rng.integers(0, 2))
        pixels = recon.pixels if isinstance(recon, md.StimulusImage) else recon
        true_img, dist_img = stimuli[i], stimuli[j]
        a_img, b_img = (true_img, dist_img) if true_on_a else (dist_img, true_img)
        trials.append(
            Trial(
                trial=i,
                reconstruction=png_payload(pixels),
                candidate_a=png_payload(a_img.pixels),
                candidate_b=png_payload(b_img.pixels),
                correct="A" if true_on_a else "B",
                stimulus_id=true_img.id,
                distractor_id=dist_img.id,
            )
        )
    session_id = f"{seed:08x}-{n:05d}"
    return RatingSession(session_id=session_id, seed=seed, trials=trials)


def save_session(session, path):
    Path(path).write_text(json.dumps(session.to_dict()))
    return Path(path)


def load_session(path):
    return RatingSession.from_dict(json.loads(Path(path).read_text()))


@dataclass
class HumComResult:
    per_rater: dict
    pooled: float
    n_raters: int
    n_trials: int
    n_choices: int

    def to_dict(self):
        return self.__dict__.copy()


def score(session, choices):
    """Fraction of choices matching the hidden correct side, per rater and
    pooled over all recorded choices."""
    if not choices:
        raise ContractError("no choices recorded")
    correct_by_trial = {t.trial: t.correct for t in session.trials}
    per_rater_counts = {}
    total = correct = 0
    for rater, trial, side in choices:
        hit = side == correct_by_trial[trial]
        n_hit, n_all = per_rater_counts.get(rater, (0, 0))
        per_rater_counts[rater] = (n_hit + hit, n_all + 1)
        total += 1
        correct += hit
    per_rater = {r: h / n for r, (h, n) in per_rater_counts.items()}
    return HumComResult(
        per_rater=per_rater,
        pooled=correct / total,
        n_raters=len(per_rater),
        n_trials=session.n_trials,
        n_choices=total,
    )


class RatingService:
    """Session state plus the choice log; thread-safe for concurrent raters."""

    def __init__(self, session, events_path=None, ui_dir=None, force_result=False):
        self.session = session
        self.events_path = Path(events_path) if events_path else None
        self.ui_dir = Path(ui_dir) if ui_dir else None
        self.force_result = force_result
        self._lock = threading.Lock()
        self._choices = {}  # (rater, trial) -> side
        self._order = []  # insertion order for scoring
        if self.events_path and self.events_path.exists():
            self._replay()

    def _replay(self):
        for line in self.events_path.read_text().splitlines():
            if not line.strip():
                continue
            ev = json.loads(line)
            key = (ev["rater"], ev["trial"])
            if key not in self._choices:
                self._choices[key] = ev["side"]
                self._order.append((ev["rater"], ev["trial"], ev["side"]))

    def session_info(self):
        return {
            "session_id": self.session.session_id,
            "n_trials": self.session.n_trials,
            "rater_token": secrets.token_hex(8),
        }

    def trial_payload(self, index):
        if not (0 <= index < self.session.n_trials):
            return None
        return self.session.trials[index].client_payload(self.session.n_trials)

    def record_choice(self, rater, trial, side):
        """Returns (status, body); duplicates keep the first choice."""
        if not isinstance(trial, int) or not (0 <= trial < self.session.n_trials):
            return 404, {"error": f"unknown trial {trial!r}"}
        if side not in SIDES:
            return 400, {"error": f"side must be one of {SIDES}"}
        if not rater or not isinstance(rater, str):
            return 400, {"error": "missing rater token"}
        with self._lock:
            key = (rater, trial)
            if key in self._choices:
                return 409, {"error": "duplicate choice", "kept": self._choices[key]}
            self._choices[key] = side
            self._order.append((rater, trial, side))
            if self.events_path:
                with open(self.events_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"rater": rater, "trial": trial, "side": side, "ts": time.time()}) + "\n")
                    fh.flush()
        return 200, {"ok": True, "trial": trial}

    def choices(self):
        with self._lock:
            return list(self._order)

    def pending_raters(self):
        counts = {}
        for rater, _, _ in self.choices():
            counts[rater] = counts.get(rater, 0) + 1
        return sorted(r for r, n in counts.items() if n < self.session.n_trials)

    def result(self, force=False):
        recorded = self.choices()
        if not recorded:
            return 409, {"error": "no choices recorded yet"}
        pending = self.pending_raters()
        if pending and not (force or self.force_result):
            return 409, {"error": "session incomplete", "pending_raters": pending}
        return 200, score(self.session, recorded).to_dict()


_CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "application/javascript",
    ".css": "text/css",
    ".png": "image/png",
    ".json": "application/json",
    ".map": "application/json",
    ".svg": "image/svg+xml",
}

_TRIAL_RE = re.compile(r"^/api/trial/(\d+)$")


def _make_handler(service):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):
            pass

        def _send_json(self, status, body):
            blob = json.dumps(body).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(blob)))
            self.end_headers()
            self.wfile.write(blob)

        def do_GET(self):
            path = self.path.split("?", 1)[0]
            if path == "/api/session":
                return self._send_json(200, service.session_info())
            m = _TRIAL_RE.match(path)
            if m:
                payload = service.trial_payload(int(m.group(1)))
                if payload is None:
                    return self._send_json(404, {"error": "unknown trial"})
                return self._send_json(200, payload)
            if path == "/api/result":
                return self._send_json(*service.result())
            return self._serve_static(path)

        def do_POST(self):
            path = self.path.split("?", 1)[0]
            if path != "/api/choice":
                return self._send_json(404, {"error": "unknown endpoint"})
            try:
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length) or b"{}")
            except (ValueError, json.JSONDecodeError):
                return self._send_json(400, {"error": "malformed JSON body"})
            status, reply = service.record_choice(
                body.get("rater"), body.get("trial"), body.get("side")
            )
            return self._send_json(status, reply)

        def _serve_static(self, path):
            if service.ui_dir is None:
                return self._send_json(404, {"error": "not found"})
            rel = path.lstrip("/") or "index.html"
            target = (service.ui_dir / rel).resolve()
            root = service.ui_dir.resolve()
            if root not in target.parents and target != root:
                return self._send_json(404, {"error": "not found"})
            if target.is_dir():
                target = target / "index.html"
            if not target.is_file():
                return self._send_json(404, {"error": "not found"})
            blob = target.read_bytes()
            self.send_response(200)
            self.send_header(
                "Content-Type", _CONTENT_TYPES.get(target.suffix, "application/octet-stream")
            )
            self.send_header("Content-Length", str(len(blob)))
            self.end_headers()
            self.wfile.write(blob)

    return Handler


def serve(session, bind="127.0.0.1:8420", events_path=None, ui_dir=None, force_result=False):
    """Build the HTTP server (not yet running). Returns (service, httpd)."""
    host, _, port = bind.partition(":")
    service = RatingService(session, events_path, ui_dir, force_result)
    httpd = ThreadingHTTPServer((host, int(port or 0)), _make_handler(service))
    return service, httpd
