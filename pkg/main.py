# main.py

from dotenv import load_dotenv                  # Lets DCP_LAB_THREADS come from a .env file.
from src.experiment_cli import cli              # The run / sweep / compare / selftest command group.

__version__ = "1.0.0"

if __name__ == "__main__":
    # Environment first, so click sees .env values as option fallbacks.
    load_dotenv()

    # Logging is configured per command once the output directory is known.
    cli(prog_name="dcp-lab")
