"""Engine double that never answers."""

import time

while True:
    time.sleep(1)
