#!/usr/bin/env python3
"""
実行結果の保存と読み込み

- スナップショットファイル (dispinn-field v1、CSV)
- バイナリ付き JSON 文書 (チェックポイント、POD 基底、縮約系)
- 損失ログと作図用 tidy CSV
"""
import csv
import json
import logging
import os
import struct
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from fv_core import Field, Grid

FIELD_MAGIC = "dispinn-field v1"
BLOB_FORMAT = "dispinn-blob v1"
LENGTH = struct.Struct("<I")


@dataclass
class SnapshotFile:
    """スナップショットファイルの内容 (data は成分ブロック順の行)"""
    nx: int
    ny: int
    n_components: int
    dt: float
    times: np.ndarray
    data: np.ndarray

    def fields(self, nu: Optional[float] = None) -> List[Field]:
        return [Field.from_flat(row, self.n_components, time=float(t), nu=nu)
                for t, row in zip(self.times, self.data)]


class ArtifactStore:
    """出力ディレクトリ配下の成果物を管理"""

    def __init__(self, out_dir: str = "runs/latest", debug: bool = False):
        self.out_dir = out_dir
        self.debug = debug
        self.logger = self._setup_logger()
        os.makedirs(out_dir, exist_ok=True)

    def _setup_logger(self) -> logging.Logger:
        logger = logging.getLogger(__name__)
        logger.setLevel(logging.DEBUG if self.debug else logging.INFO)

        if not logger.handlers:
            handler = logging.StreamHandler()
            formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')
            handler.setFormatter(formatter)
            logger.addHandler(handler)

        return logger

    def path(self, name: str) -> str:
        return name if os.path.isabs(name) else os.path.join(self.out_dir, name)

    # ------------------------------------------------------------ snapshots

    def write_snapshots(self, name: str, grid: Grid, dt: float, fields: Sequence[Field]) -> str:
        """1 行 1 時刻、セル順に成分を並べた CSV として保存"""
        if not fields:
            raise ValueError("No fields to write")
        n_comp = fields[0].n_components
        times = ";".join(f"{f.time:.17g}" for f in fields)
        header = f"{FIELD_MAGIC}; {grid.nx}; {grid.ny}; {n_comp}; {dt:.17g}; {times}"
        path = self.path(name)
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(header + "\n")
            for fld in fields:
                if fld.n_cells != grid.n_cells or fld.n_components != n_comp:
                    raise ValueError("All fields must match the grid and component count")
                f.write(",".join(f"{v:.17g}" for v in fld.values.T.ravel()) + "\n")
        self.logger.info(f"📦 Wrote {len(fields)} snapshots to {path}")
        return path

    def read_snapshots(self, name: str) -> SnapshotFile:
        path = self.path(name)
        with open(path, "r", encoding="utf-8") as f:
            header = f.readline().strip()
            rows = [line.strip() for line in f if line.strip()]
        parts = [p.strip() for p in header.split(";")]
        if len(parts) < 5 or parts[0] != FIELD_MAGIC:
            raise ValueError(f"{path} is not a {FIELD_MAGIC} file")
        nx, ny, n_comp = int(parts[1]), int(parts[2]), int(parts[3])
        dt = float(parts[4])
        times = np.array([float(t) for t in parts[5:]])
        if len(rows) != times.size:
            raise ValueError(f"{path}: {len(rows)} rows but {times.size} times in header")
        n_cells = nx * ny
        data = np.empty((len(rows), n_comp * n_cells))
        for k, line in enumerate(rows):
            values = np.array([float(v) for v in line.split(",")])
            if values.size != n_comp * n_cells:
                raise ValueError(f"{path}: row {k} has {values.size} values, expected {n_comp * n_cells}")
            data[k] = values.reshape(n_cells, n_comp).T.ravel()
        return SnapshotFile(nx=nx, ny=ny, n_components=n_comp, dt=dt, times=times, data=data)

    # ------------------------------------------------------------ binary documents

    def write_document(self, name: str, header: Dict[str, Any],
                       arrays: Sequence[Tuple[str, np.ndarray]]) -> str:
        """JSON ヘッダー + little-endian float64 の連結バイナリ"""
        meta = dict(header)
        meta["format"] = BLOB_FORMAT
        meta["arrays"] = [{"name": n, "shape": list(np.shape(a))} for n, a in arrays]
        head = json.dumps(meta, sort_keys=True).encode("utf-8")
        path = self.path(name)
        with open(path, "wb") as f:
            f.write(LENGTH.pack(len(head)))
            f.write(head)
            for _, array in arrays:
                f.write(np.ascontiguousarray(array, dtype="<f8").tobytes())
        self.logger.info(f"📦 Wrote {header.get('kind', 'document')} to {path}")
        return path

    def read_document(self, name: str) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
        path = self.path(name)
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) < LENGTH.size:
            raise ValueError(f"{path} is truncated")
        (length,) = LENGTH.unpack(raw[:LENGTH.size])
        try:
            meta = json.loads(raw[LENGTH.size:LENGTH.size + length].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ValueError(f"{path} has an invalid header: {e}")
        if meta.get("format") != BLOB_FORMAT:
            raise ValueError(f"{path} is not a {BLOB_FORMAT} document")
        pos = LENGTH.size + length
        arrays = {}
        for entry in meta.pop("arrays"):
            shape = tuple(entry["shape"])
            count = int(np.prod(shape))
            chunk = raw[pos:pos + 8 * count]
            if len(chunk) != 8 * count:
                raise ValueError(f"{path}: array {entry['name']} is truncated")
            arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
            pos += 8 * count
        meta.pop("format")
        return meta, arrays

    # ------------------------------------------------------------ tables

    def write_loss_log(self, name: str, reports: Iterable[Any]) -> str:
        """LossReport の CSV ログ"""
        rows = [r.to_row() for r in reports]
        path = self.path(name)
        with open(path, "w", encoding="utf-8", newline="") as f:
            if rows:
                writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
                writer.writeheader()
                for row in rows:
                    writer.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v) for k, v in row.items()})
        self.logger.info(f"📦 Wrote {len(rows)} loss rows to {path}")
        return path

    def write_tidy_csv(self, name: str, rows: Iterable[Tuple[float, str, float]]) -> str:
        """作図用 (time, series, value)"""
        path = self.path(name)
        count = 0
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["time", "series", "value"])
            for t, series, value in rows:
                writer.writerow([f"{t:.17g}", series, f"{value:.17g}"])
                count += 1
        self.logger.debug(f"Wrote {count} plot rows to {path}")
        return path

    def write_json(self, name: str, data: Dict[str, Any]) -> str:
        path = self.path(name)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, sort_keys=True, ensure_ascii=False)
        return path

    def get_store_stats(self) -> Dict[str, Any]:
        """出力ディレクトリの統計情報"""
        stats = {"total_files": 0, "size_mb": 0.0, "files": []}
        for filename in sorted(os.listdir(self.out_dir)):
            filepath = os.path.join(self.out_dir, filename)
            if not os.path.isfile(filepath):
                continue
            size_mb = os.stat(filepath).st_size / (1024 * 1024)
            stats["files"].append({"filename": filename, "size_mb": size_mb})
            stats["total_files"] += 1
            stats["size_mb"] += size_mb
        return stats
