class Constants:
    CLASS_NAMES = ["No Cloud", "Thin Cloud", "Thick Cloud"]
    NUM_CLASSES = 3
    CLOUD_CLASSES = (1, 2)

    # Scene tiling
    TILE_SIZE = 254
    CROP_SIZE = 252

    # File formats
    CUBE_MAGIC = b"HSCB"
    CUBE_VERSION = 1
    CUBE_DTYPE_FLOAT32 = 1
    MASK_MAGIC = b"MSK1"
    WEIGHTS_MAGIC = b"WGT1"
    WEIGHTS_VERSION = 1

    # RGB composite (raw sensor band numbering)
    COMPOSITE_BANDS = (31, 21, 13)
    COMPOSITE_AUX_BANDS = (123, 150)
    COMPOSITE_AUX_FRACTION = 0.2
    STRETCH_LOW_PERCENTILE = 1.0
    STRETCH_HIGH_PERCENTILE = 97.0

    # Dataset statistics
    COVERAGE_BINS = 10

    # Band selection
    CLUSTER_THRESHOLD = 0.9
    EVERY_SECOND_LIMIT = 98
    DEGENERATE_STD = 1e-12
    JACOBI_TOLERANCE = 1e-12
    JACOBI_MAX_SWEEPS = 100
    PIXELS_PER_TILE = 1024

    # 1D network: shortest spectrum that survives four conv(6)+pool(2) blocks
    MIN_1D_INPUT_LENGTH = 91
    LIUNET_KERNEL = 6
    LIUNET_FILTERS = (6, 12, 18, 24)
    UNET_FILTERS = (6, 12, 12, 6, 6)

    # Training
    EPOCHS = 20
    BATCH_SIZE = 22
    LEARNING_RATE = 1e-3
    ADAM_BETA1 = 0.9
    ADAM_BETA2 = 0.999
    ADAM_EPSILON = 1e-8
    PROBABILITY_FLOOR = 1e-12
    # 2D samples per recorded forward pass when accumulating a batch
    MICRO_BATCH_2D = 2
    EVAL_CHUNK_1D = 4096

    # Split ratios (train / val, test takes the remainder)
    TRAIN_FRACTION = 0.7
    VAL_FRACTION = 0.2
    MIN_SPLIT_TILES = 10

    # Tile-level decision
    CLOUDY_THRESHOLD = 0.70

    # Report schemas
    EVAL_REPORT_SCHEMA = "evalreport/1"
    BAND_SELECTION_SCHEMA = "bandselection/1"
    MODEL_MANIFEST_SCHEMA = "modelmanifest/1"
    SPLIT_PLAN_SCHEMA = "splitplan/1"
    BENCH_SCHEMA = "benchresult/1"
