import os

from dotenv import load_dotenv

load_dotenv()

log_level = os.getenv("KRND_LOG_LEVEL", "INFO")
log_file = os.getenv("KRND_LOG_FILE", "kronround.log")

output_dir = os.getenv("KRND_OUTPUT_DIR", "results")

# Hessian regularization, as a fraction of tr(H)/n
default_reg = float(os.getenv("KRND_DEFAULT_REG", "1e-4"))

# concurrent trials in `run`
default_threads = int(os.getenv("KRND_THREADS", "4"))

# largest mn accepted by the dense vectorized oracle
oracle_size_cap = int(os.getenv("KRND_ORACLE_SIZE_CAP", "4096"))
