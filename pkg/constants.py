"""Project constants

Single source of truth for versioning referenced by writers, readers and logs.
"""

# Schema version stamped into JSON artifacts and log lines
SCHEMA_VERSION = "2026-10-01"

# RunRecord layout version (run_record.json)
RECORD_VERSION = 1

# Binary formats: magic bytes + version (little-endian payloads)
PARAMS_MAGIC = b"FCPV"
PARAMS_VERSION = 1
SYNTH_MAGIC = b"FCSM"
SYNTH_VERSION = 1
