"""
Reading and writing the CSV tables that utilscope consumes and produces.

Every file we write starts with a single comment line holding the run
manifest, so a table can always be traced back to the command and inputs
that made it. Readers skip leading comment lines and keep track of the file
line each row came from, so validation errors can point at it.
"""
import hashlib
import io
import json
import logging
import math
import sys
import time

import attr
import pandas as pd

MANIFEST_PREFIX = "# utilscope-manifest: "
REPORT_FLOAT_FORMAT = "%.6g"


class TableError(ValueError):
    """
    A table row or column fails validation. ``line`` is the 1-based line in
    the file, None when the problem is with the header.
    """
    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = []
        if line is not None:
            where.append("line {}".format(line))
        if column is not None:
            where.append("column '{}'".format(column))
        if where:
            message = "{}: {}".format(", ".join(where), message)
        super().__init__(message)


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def digest_file(path):
    sha = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            sha.update(block)
    return sha.hexdigest()


@attr.s
class RunManifest(object):
    """
    Provenance of one utilscope invocation.
    """
    version = attr.ib()
    command = attr.ib(converter=list)
    digests = attr.ib(factory=dict)
    seed = attr.ib(default=None)
    config = attr.ib(factory=dict)
    started = attr.ib(factory=_now)
    finished = attr.ib(default=None)

    def add_input(self, path):
        self.digests[path] = digest_file(path)

    def to_comment(self):
        if self.finished is None:
            self.finished = _now()
        return MANIFEST_PREFIX + json.dumps(attr.asdict(self), sort_keys=True)


def read_manifest(path):
    """
    Returns the manifest dict at the top of ``path``, or None if there is none.
    """
    with open(path) as f:
        first = f.readline()
    if first.startswith(MANIFEST_PREFIX):
        return json.loads(first[len(MANIFEST_PREFIX):])
    return None


def read_table(path, columns):
    """
    Reads a CSV with exactly the given header. Leading ``#`` lines are
    skipped. The returned frame is indexed by the file line of each row.
    """
    with open(path) as f:
        text = f.read()
    lines = text.splitlines(keepends=True)
    skipped = 0
    while skipped < len(lines) and lines[skipped].startswith("#"):
        skipped += 1
    body = "".join(lines[skipped:])
    if body.strip() == "":
        raise TableError("{} has no header".format(path), line=skipped + 1)
    frame = pd.read_csv(
        io.StringIO(body), dtype=str, keep_default_na=False, skipinitialspace=True,
        skip_blank_lines=False)
    header = [c.strip() for c in frame.columns]
    if header != list(columns):
        raise TableError(
            "{}: expected header {}, got {}".format(path, ",".join(columns), ",".join(header)),
            line=skipped + 1)
    frame.columns = header
    # one row per physical line, blank lines included, then the blanks dropped
    frame.index = range(skipped + 2, skipped + 2 + len(frame))
    blank = [line > len(lines) or lines[line - 1].strip() == "" for line in frame.index]
    frame = frame[[not b for b in blank]]
    logging.debug("Read {} rows from {}".format(len(frame), path))
    return frame


def numeric_column(frame, column):
    """
    Parses a column as finite floats. ``float`` round-trips the shortest
    repr exactly, which pandas' fast parser does not guarantee.
    """
    values = []
    for line, text in frame[column].items():
        try:
            value = float(text)
        except ValueError:
            value = math.nan
        if not math.isfinite(value):
            raise TableError("'{}' is not a finite number".format(text), line, column)
        values.append(value)
    return pd.Series(values, index=frame.index, dtype=float)


def check_column(frame, column, values, ok, requirement):
    """
    Raises a TableError at the first row where the boolean Series ``ok``
    is False.
    """
    if not ok.all():
        line = (~ok).idxmax()
        raise TableError("{} {}, got {}".format(column, requirement, values[line]), line, column)


def _open_output(out):
    if out is None or out == "-":
        return sys.stdout, False
    if isinstance(out, str):
        return open(out, "w"), True
    return out, False


def write_table(frame, out, manifest=None, float_format=REPORT_FLOAT_FORMAT):
    """
    Writes ``frame`` as CSV to ``out`` (a path, a file object, or None / "-"
    for stdout) behind the manifest comment line. ``float_format=None``
    keeps full precision.
    """
    f, close = _open_output(out)
    try:
        if manifest is not None:
            f.write(manifest.to_comment() + "\n")
        frame.to_csv(f, index=False, float_format=float_format)
    finally:
        if close:
            f.close()
    if isinstance(out, str) and out != "-":
        logging.info("Wrote {} rows to {}".format(len(frame), out))


def write_report(lines, out, manifest=None):
    f, close = _open_output(out)
    try:
        if manifest is not None:
            f.write(manifest.to_comment() + "\n")
        for line in lines:
            f.write(line + "\n")
    finally:
        if close:
            f.close()
