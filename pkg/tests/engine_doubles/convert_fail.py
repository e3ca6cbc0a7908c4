"""Engine double that rejects every model at conversion."""

import argparse
import json
import sys
from pathlib import Path

parser = argparse.ArgumentParser()
parser.add_argument('--dir', required=True)
args = parser.parse_args()

status = {'stage': 'convert', 'code': 108, 'message': 'writeFb check failed', 'op': 'Transpose'}
(Path(args.dir) / 'status.json').write_text(json.dumps(status), encoding='utf-8')
sys.exit(1)
