import os
from dotenv import load_dotenv

load_dotenv()

DELFI_SEED = int(os.getenv("DELFI_SEED", 0))
DELFI_HIDDEN_SIZE = int(os.getenv("DELFI_HIDDEN_SIZE", 32))
DELFI_NUM_LAYERS = int(os.getenv("DELFI_NUM_LAYERS", 2))
DELFI_BATCH_SIZE = int(os.getenv("DELFI_BATCH_SIZE", 32))
DELFI_EPOCHS = int(os.getenv("DELFI_EPOCHS", 10))
DELFI_N_T = int(os.getenv("DELFI_N_T", 10))
DELFI_M_T = int(os.getenv("DELFI_M_T", 10))
DELFI_PRETRAIN_EPOCHS = int(os.getenv("DELFI_PRETRAIN_EPOCHS", 5))
DELFI_LR = float(os.getenv("DELFI_LR", 0.005))
DELFI_CLIP_NORM = float(os.getenv("DELFI_CLIP_NORM", 5.0))
DELFI_KNN_K = int(os.getenv("DELFI_KNN_K", 5))
DELFI_THREADS = int(os.getenv("DELFI_THREADS", 1))
DELFI_LOG_LEVEL = os.getenv("DELFI_LOG_LEVEL", "INFO")
