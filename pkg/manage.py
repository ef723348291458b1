#!/usr/bin/env python
"""
cbam_lab command line.

    python manage.py gen-data --spec synth.json --out train.cbds
    python manage.py train --config cbam.json --data train.cbds --out ckpt/
    python manage.py ablate --matrix channel --data train.cbds --out report.csv --seeds 5
    python manage.py check-grad --full-block
    python manage.py gradcam --model ckpt/ --image img.cbt --class 2 --out cam.pgm
"""
import os
import sys


def main():
    os.environ.setdefault("DJANGO_SETTINGS_MODULE", "cbam_lab.settings")
    try:
        from django.core.management import execute_from_command_line
    except ImportError as exc:
        raise ImportError(
            "Couldn't import Django. Install the packages in requirements.txt "
            "into the active environment."
        ) from exc
    execute_from_command_line(sys.argv)


if __name__ == "__main__":
    main()
