import os

from dotenv import load_dotenv

load_dotenv()

# Environment-based configuration
ENVIRONMENT = os.getenv('TAABENCH_ENV', 'development')

# Resource limits based on environment
if ENVIRONMENT == 'production':
    MAX_WORKERS = 8   # Full grid runs
    DEFAULT_SAMPLES = 500
elif ENVIRONMENT == 'ci':
    MAX_WORKERS = 2   # Shared runners
    DEFAULT_SAMPLES = 50
else:
    MAX_WORKERS = 4   # Development
    DEFAULT_SAMPLES = 200

# Output and logging
OUTPUT_DIR = os.getenv('TAABENCH_OUT', 'runs')
LOG_LEVEL = os.getenv('TAABENCH_LOG_LEVEL', 'INFO')
LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'
RUN_LOG_NAME = 'bench_runs.log'

# Evaluation chunk size (bounds conv window memory during predict)
PREDICT_BATCH = 256

# Image geometry shared by dataset, model zoo and transforms
IMAGE_SIZE = 16
IMAGE_CHANNELS = 1
NUM_CLASSES = 10
