#!/usr/bin/env python3
"""Validate a run config (JSON) or a results store (newline-delimited JSON) against a schema.

Usage:
  python tools/validate_json.py --schema schema/run_config.schema.json --data run_config.example.json
  python tools/validate_json.py --schema schema/run_record.schema.json --data runs/records.ndjson
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from jsonschema import Draft7Validator
from jsonschema.exceptions import ValidationError

MAX_ERRORS = 50


def _format_error(err: ValidationError, prefix: str = "$") -> str:
    loc = prefix + "".join(f"[{repr(p)}]" if isinstance(p, int) else f".{p}" for p in err.path)
    schema_loc = "/".join(str(p) for p in err.schema_path)
    return f"path={loc} schema={schema_loc} error={err.message}"


def _documents(data_path: Path) -> list[tuple[str, object]]:
    """(location prefix, document) pairs; NDJSON files yield one per non-empty line."""
    text = data_path.read_text(encoding="utf-8")
    if data_path.suffix not in {".ndjson", ".jsonl"}:
        return [("$", json.loads(text))]
    docs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.strip():
            docs.append((f"line{lineno}:$", json.loads(line)))
    return docs


def validate(schema_path: Path, data_path: Path) -> int:
    try:
        schema = json.loads(schema_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        print(f"Failed to parse JSON schema file '{schema_path}': {e}")
        return 1
    try:
        documents = _documents(data_path)
    except json.JSONDecodeError as e:
        print(f"Failed to parse JSON data file '{data_path}': {e}")
        return 1
    validator = Draft7Validator(schema)
    errors: list[str] = []
    for prefix, doc in documents:
        for e in sorted(validator.iter_errors(doc), key=lambda e: list(e.path)):
            errors.append(_format_error(e, prefix))
    if errors:
        print(f"Validation failed for {data_path} against {schema_path}:")
        for line in errors[:MAX_ERRORS]:
            print(" -", line)
        if len(errors) > MAX_ERRORS:
            print(f" ... and {len(errors) - MAX_ERRORS} more errors")
        return 1
    print(f"Validation passed: {data_path} ({len(documents)} document(s))")
    return 0


def main(argv: list[str] | None = None) -> int:
    p = argparse.ArgumentParser(description="Validate a config or results store against a JSON schema")
    p.add_argument("--schema", required=True, help="Path to JSON Schema file")
    p.add_argument("--data", required=True, help="Path to a .json document or a .ndjson store")
    ns = p.parse_args(argv)
    return validate(Path(ns.schema), Path(ns.data))


if __name__ == "__main__":
    sys.exit(main())
