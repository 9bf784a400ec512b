import csv
import io
import logging
from enum import IntEnum
from typing import Iterable, List, Literal

from pydantic import BaseModel, Field, ValidationError

from app.errors import DuplicatePath, IoFailure, MalformedRow

logger = logging.getLogger(__name__)

MANIFEST_HEADER = ["image", "quality", "split"]


class QualityLabel(IntEnum):
    GOOD = 0
    USABLE = 1
    REJECT = 2

    @property
    def slug(self) -> str:
        return self.name.lower()


class SampleRecord(BaseModel):
    image_path: str = Field(min_length=1)
    label: QualityLabel
    split: Literal["train", "test"]


def load_manifest(csv_bytes: bytes) -> List[SampleRecord]:
    """Parse an `image,quality,split` manifest, keeping row order.

    Raises:
        MalformedRow: wrong header, arity, label or split (1-based line number)
        DuplicatePath: the same image listed twice
    """
    try:
        text = csv_bytes.decode("utf-8-sig")
    except UnicodeDecodeError as e:
        raise MalformedRow(1, f"not UTF-8: {e}") from e

    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [cell.strip() for cell in rows[0]] != MANIFEST_HEADER:
        raise MalformedRow(1, f"header must be {','.join(MANIFEST_HEADER)}")

    records: List[SampleRecord] = []
    seen = set()
    for line_number, row in enumerate(rows[1:], start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(MANIFEST_HEADER):
            raise MalformedRow(line_number, f"expected 3 fields, got {len(row)}")
        image, quality, split = (cell.strip() for cell in row)
        try:
            record = SampleRecord(image_path=image, label=int(quality), split=split)
        except (ValueError, ValidationError) as e:
            raise MalformedRow(line_number, str(e).splitlines()[0]) from e
        if record.image_path in seen:
            raise DuplicatePath(f"{record.image_path} listed twice (line {line_number})")
        seen.add(record.image_path)
        records.append(record)

    logger.info(f"✓ Loaded {len(records)} manifest records")
    return records


def read_manifest(path: str) -> List[SampleRecord]:
    try:
        with open(path, "rb") as f:
            return load_manifest(f.read())
    except OSError as e:
        raise IoFailure(f"cannot read manifest {path}: {e}") from e


def encode_manifest(records: Iterable[SampleRecord]) -> bytes:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for record in records:
        writer.writerow([record.image_path, int(record.label), record.split])
    return out.getvalue().encode("utf-8")
