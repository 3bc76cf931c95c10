import logging

from decouple import config
from dotenv import load_dotenv

load_dotenv()

SCHEMA_VERSION = "1"

T2I_URL = config("SHADOWFORGE_T2I_URL", default="")
T2I_TOKEN = config("SHADOWFORGE_T2I_TOKEN", default="")
SERVER_PORT = config("SHADOWFORGE_SERVER_PORT", default=8500, cast=int)
CACHE_DIR = config("SHADOWFORGE_CACHE_DIR", default=".shadowforge-cache")
LOG_LEVEL = config("SHADOWFORGE_LOG_LEVEL", default="INFO")

PROMPT_TEMPLATE = "a photo of a {}"

# purpose tags carried by every ledger debit
DISTILLATION_PURPOSE = "distillation-labels"
EVALUATION_PURPOSE = "evaluation"

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level=None):
    """Configure root logging once for command line use."""
    logging.basicConfig(level=(level or LOG_LEVEL).upper(), format=LOG_FORMAT)
