"""On-disk window cache: a plain-text manifest plus one binary array file.

``manifest.txt`` holds ``key = value`` lines::

    format = colhar-windows/1
    key = <hash of the data-relevant config>
    channels, window_length, num_classes, class_map, segments
    segment.<i> = agent=<id> split=<train|test|global> subject=<tag> count=<n> offset=<record>

``windows.bin`` is a sequence of records, each ``1 + channels * window_length``
little-endian float64 values: the class index, then the window row-major
(channel by channel). Segment ``offset`` counts records, not bytes.
"""
from __future__ import annotations

import logging
import os
from typing import Sequence

import numpy as np

from .data import AgentDataset
from .nn import SensorWindow

log = logging.getLogger(__name__)

FORMAT = "colhar-windows/1"
MANIFEST = "manifest.txt"
ARRAYS = "windows.bin"


def _read_manifest(path: str) -> dict[str, str]:
    entries = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            entries[k.strip()] = v.strip()
    return entries


def read_manifest(directory: str) -> dict[str, str] | None:
    path = os.path.join(directory, MANIFEST)
    return _read_manifest(path) if os.path.isfile(path) else None


def save_cache(directory: str, key: str, datasets: Sequence[AgentDataset],
               global_test: Sequence[SensorWindow] = (), channels: int | None = None,
               window_length: int | None = None) -> None:
    os.makedirs(directory, exist_ok=True)
    class_map = datasets[0].class_map if datasets else {}
    segments = []
    for ds in datasets:
        segments.append((ds.agent_id, "train", ds.subject, ds.train))
        segments.append((ds.agent_id, "test", ds.subject, ds.test))
    if global_test:
        subjects = sorted({w.subject for w in global_test})
        for s in subjects:
            segments.append((-1, "global", s, [w for w in global_test if w.subject == s]))
    any_window = next((w for seg in segments for w in seg[3]), None)
    if any_window is not None:
        channels, window_length = any_window.data.shape
    width = 1 + channels * window_length
    lines = [f"format = {FORMAT}", f"key = {key}", f"channels = {channels}",
             f"window_length = {window_length}", f"num_classes = {len(class_map)}",
             "class_map = " + ",".join(f"{a}:{c}" for a, c in sorted(class_map.items())),
             f"segments = {len(segments)}"]
    offset = 0
    tmp = os.path.join(directory, ARRAYS + ".tmp")
    with open(tmp, "wb") as fh:
        for i, (agent, split, subject, windows) in enumerate(segments):
            lines.append(f"segment.{i} = agent={agent} split={split} subject={subject} "
                         f"count={len(windows)} offset={offset}")
            if windows:
                block = np.empty((len(windows), width), dtype="<f8")
                block[:, 0] = [w.label for w in windows]
                block[:, 1:] = np.stack([w.data for w in windows]).reshape(len(windows), -1)
                fh.write(block.tobytes())
            offset += len(windows)
    os.replace(tmp, os.path.join(directory, ARRAYS))
    # manifest last: its presence marks a complete cache
    with open(os.path.join(directory, MANIFEST), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_cache(directory: str, key: str) -> tuple[list[AgentDataset], list[SensorWindow]] | None:
    """Return cached datasets, or None (with a log message) on a miss or stale key."""
    manifest = read_manifest(directory)
    if manifest is None or not os.path.isfile(os.path.join(directory, ARRAYS)):
        return None
    if manifest.get("format") != FORMAT or manifest.get("key") != key:
        log.warning("window cache in %s was built for a different configuration "
                    "(cached key %s, expected %s); rebuilding",
                    directory, manifest.get("key"), key)
        return None
    channels = int(manifest["channels"])
    length = int(manifest["window_length"])
    class_map = {}
    if manifest["class_map"]:
        for pair in manifest["class_map"].split(","):
            a, c = pair.split(":")
            class_map[int(a)] = int(c)
    raw = np.fromfile(os.path.join(directory, ARRAYS), dtype="<f8")
    records = raw.reshape(-1, 1 + channels * length) if raw.size else raw.reshape(0, 1)
    per_agent: dict[int, dict[str, object]] = {}
    global_test: list[SensorWindow] = []
    for i in range(int(manifest["segments"])):
        fields = dict(item.split("=", 1) for item in manifest[f"segment.{i}"].split())
        count, offset = int(fields["count"]), int(fields["offset"])
        block = records[offset:offset + count]
        windows = [SensorWindow(row[1:].reshape(channels, length).copy(), int(row[0]),
                                fields["subject"]) for row in block]
        agent = int(fields["agent"])
        if fields["split"] == "global":
            global_test.extend(windows)
        else:
            slot = per_agent.setdefault(agent, {"subject": fields["subject"]})
            slot[fields["split"]] = windows
    datasets = [AgentDataset(a, v.get("train", []), v.get("test", []), dict(class_map),
                             v["subject"]) for a, v in sorted(per_agent.items())]
    return datasets, global_test
