"""Knowledge-injected context compression for retrieval-augmented biomedical QA."""

__version__ = "0.1.0"

ENT_TOKEN = "<ent>"
EOD_TOKEN = "<eod>"
RESERVED_TOKENS = (ENT_TOKEN, EOD_TOKEN)
