#!/usr/bin/env python3
"""
WSGI entry point for production deployment
Use with Gunicorn: gunicorn -w 2 -b 0.0.0.0:8080 --timeout 600 wsgi:app
"""

import logging

from app import app

logging.basicConfig(level=logging.INFO, format='%(asctime)s %(levelname)s %(name)s: %(message)s')

if __name__ == "__main__":
    app.run()
