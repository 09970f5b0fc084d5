LOGGER_NAME = 'mmreg'

DEFAULT_ANGLES = tuple(float(a) for a in range(0, 360, 30))
DEFAULT_RESOLUTIONS = (100, 200, 300, 400, 500)
DEFAULT_SCALE_TOLERANCE = 0.10
DEFAULT_DEFORMABLE_RESOLUTION = 1024

FIELD_MAGIC = b'MMDF'
FIELD_VERSION = 1
PLUGIN_HEADER = 'MMREG/1'

EXIT_OK = 0
EXIT_INPUT = 3
EXIT_NUMERICAL = 4
