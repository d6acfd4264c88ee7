from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, TypedDict
import json

from loguru import logger

from tempomesh.errors import FrozenParamsError

RUNS_FILE_NAME = "runs.json"
SESSION_STATUSES = ("in_progress", "completed", "failed", "interrupted")


class SessionDict(TypedDict, total=False):
    """One CLI run in the run ledger.

    Attributes:
        id: Sequential session number
        command: CLI subcommand that opened the session
        start_time: ISO timestamp of the start
        end_time: ISO timestamp of the end, once closed
        status: One of in_progress|completed|failed|interrupted
        out_dir: Output directory of the run, if any
        frozen_vae_hash: Parameter hash of the shape autoencoder pinned for the run
        events: Checkpoint, metrics and failure events in order
    """

    id: int
    command: str
    start_time: str
    end_time: Optional[str]
    status: str
    out_dir: Optional[str]
    frozen_vae_hash: Optional[str]
    events: List[Dict[str, Any]]


class RunHistory:
    """JSON ledger of training, inference and evaluation runs.

    The ledger lives next to the checkpoints (``runs.json``). Each CLI run opens a
    session; training phases append ``checkpoint`` events, evaluations append
    ``metrics`` events and errors append ``failure`` events. Sessions left
    ``in_progress`` by an abnormal exit are marked ``interrupted`` on the next load.

    Attributes:
        history_file (Path): Location of the ledger.
        sessions (List[SessionDict]): All recorded sessions.
        current_session (Optional[SessionDict]): The open session, or None.
    """

    def __init__(self, history_file: Path):
        self.history_file = Path(history_file)
        self.history_file.parent.mkdir(parents=True, exist_ok=True)
        self.sessions: List[SessionDict] = []
        self.current_session: Optional[SessionDict] = None
        self._load_history()
        if not self.history_file.exists():
            self._save_history()

    @property
    def events(self) -> List[Dict[str, Any]]:
        """All events of all sessions as a flat list."""
        all_events = []
        for session in self.sessions:
            all_events.extend(session.get("events", []))
        return all_events

    def _load_history(self):
        """Load the ledger, recovering sessions an abnormal exit left in progress."""
        if not self.history_file.exists():
            return
        try:
            with open(self.history_file) as f:
                data = json.load(f)
        except (json.JSONDecodeError, OSError):
            logger.warning("HISTORY [CORRUPT] | failed to load run history, starting fresh")
            self.sessions = []
            return

        if not isinstance(data, list) or not all(isinstance(s, dict) for s in data):
            logger.warning("HISTORY [CORRUPT] | unexpected run history layout, starting fresh")
            self.sessions = []
            return

        self.sessions = data
        recovered = False
        for session in self.sessions:
            session.setdefault("events", [])
            if session.get("status", "").lower() == "in_progress":
                session["status"] = "interrupted"
                recovered = True
                logger.info(f"HISTORY [RECOVERED] | session: {session.get('id')} | status: interrupted")
        if recovered:
            self._save_history()

    def _save_history(self):
        """Write the ledger; failures are logged, never raised."""
        try:
            self.history_file.parent.mkdir(parents=True, exist_ok=True)
            with open(self.history_file, "w") as f:
                f.write(json.dumps(self.sessions, indent=2))
        except Exception as e:
            logger.error(f"Failed to save run history: {e}")

    def start_session(
        self,
        command: str,
        out_dir: Optional[Path] = None,
        frozen_vae_hash: Optional[str] = None,
    ) -> int:
        """Open a session for one CLI run.

        Args:
            command: Subcommand name.
            out_dir: Output directory of the run.
            frozen_vae_hash: Hash of the autoencoder parameters that must stay
                unchanged for the rest of the run.

        Returns:
            int: The new session id.
        """
        if self.current_session is not None:
            self.close_session("completed")

        session: SessionDict = {
            "id": len(self.sessions) + 1,
            "command": command,
            "start_time": datetime.now().isoformat(),
            "end_time": None,
            "status": "in_progress",
            "out_dir": str(out_dir) if out_dir else None,
            "frozen_vae_hash": frozen_vae_hash,
            "events": [],
        }
        self.current_session = session
        self.sessions.append(session)
        self._save_history()
        return session["id"]

    def add_event(self, kind: str, **payload) -> Dict[str, Any]:
        """Append an event (``checkpoint``, ``metrics`` or ``failure``) to the open session."""
        if self.current_session is None:
            self.start_session("unknown")
        event = {"type": kind, "timestamp": datetime.now().isoformat(), **_jsonable(payload)}
        self.current_session["events"].append(event)
        self._save_history()
        return event

    def record_checkpoint(
        self,
        phase: str,
        step: int,
        loss: Optional[float],
        path: Path,
        param_hash: str,
        vae_hash: Optional[str] = None,
    ) -> Dict[str, Any]:
        logger.info(f"{phase.upper()} [CHECKPOINT] | step: {step} | path: {path}")
        return self.add_event(
            "checkpoint",
            phase=phase,
            step=step,
            loss=loss,
            path=str(path),
            param_hash=param_hash,
            vae_hash=vae_hash,
        )

    def assert_frozen(self, vae_hash: str) -> None:
        """Check the autoencoder hash against the one pinned when the session began.

        Raises:
            FrozenParamsError: If the hashes differ.
        """
        if self.current_session is None:
            return
        pinned = self.current_session.get("frozen_vae_hash")
        if pinned is not None and pinned != vae_hash:
            self.add_event("failure", reason="frozen parameters changed", expected=pinned, found=vae_hash)
            raise FrozenParamsError(
                f"shape autoencoder parameters changed during the run ({pinned[:12]} -> {vae_hash[:12]})"
            )

    def close_session(self, status: str = "completed") -> None:
        if self.current_session is None:
            return
        if status not in SESSION_STATUSES:
            raise ValueError(f"unknown session status: {status}")
        self.current_session["status"] = status
        self.current_session["end_time"] = datetime.now().isoformat()
        self.current_session = None
        self._save_history()

    def get_session(self, session_id: int) -> Optional[SessionDict]:
        return next((s for s in self.sessions if s["id"] == session_id), None)

    def get_last_session(self) -> Optional[SessionDict]:
        """Get the most recent session."""
        return self.sessions[-1] if self.sessions else None

    def clear_history(self):
        self.sessions = []
        self.current_session = None
        self._save_history()


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    if hasattr(value, "item") and callable(value.item):
        try:
            return value.item()
        except (TypeError, ValueError):
            return str(value)
    return value
