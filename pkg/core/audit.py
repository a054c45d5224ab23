import threading
from contextlib import contextmanager
from contextvars import ContextVar
from typing import Iterator

from pydantic import BaseModel, ConfigDict, Field

# Consumers allowed to read target-domain ground truth.
GROUND_TRUTH_READERS = frozenset({"oracle", "evaluator"})

_current_consumer: ContextVar[str] = ContextVar(
    "annotation_consumer", default="unscoped")


class AccessEvent(BaseModel):
    consumer: str
    path: str
    domains: list[str] = Field(default_factory=list)
    annotations_read: bool = False
    provenances: list[str] = Field(default_factory=list)
    # Domains of the images whose ground-truth annotations were read.
    ground_truth_domains: list[str] = Field(default_factory=list)

    model_config = ConfigDict(frozen=True)

    def reads_target_ground_truth(self) -> bool:
        return self.annotations_read and "target" in self.ground_truth_domains


class AnnotationAudit:
    """
    Process-wide record of manifest loads.
    Every load made through ``utilis.manifest_helper.load_manifest`` is
    recorded with the consumer active in the calling context.
    """

    def __init__(self):
        self._events: list[AccessEvent] = []
        self._lock = threading.Lock()

    @contextmanager
    def consumer(self, name: str) -> Iterator[None]:
        token = _current_consumer.set(name)
        try:
            yield
        finally:
            _current_consumer.reset(token)

    @property
    def current_consumer(self) -> str:
        return _current_consumer.get()

    def record(self, path: str, domains: list[str],
               annotations_read: bool, provenances: list[str],
               ground_truth_domains: list[str] | None = None) -> None:
        event = AccessEvent(
            consumer=self.current_consumer,
            path=path,
            domains=sorted(set(domains)),
            annotations_read=annotations_read,
            provenances=sorted(set(provenances)),
            ground_truth_domains=sorted(set(ground_truth_domains or [])),
        )
        with self._lock:
            self._events.append(event)

    def events(self, consumer: str | None = None) -> list[AccessEvent]:
        with self._lock:
            events = list(self._events)
        if consumer is None:
            return events
        return [event for event in events if event.consumer == consumer]

    def ground_truth_leaks(self) -> list[AccessEvent]:
        """
        Target ground-truth reads made by consumers other than the oracle
        run and the evaluator.
        """
        return [event for event in self.events()
                if event.reads_target_ground_truth()
                and event.consumer not in GROUND_TRUTH_READERS]

    def reset(self) -> None:
        with self._lock:
            self._events.clear()


audit = AnnotationAudit()
