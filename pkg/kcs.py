#!/usr/bin/env python3
"""
启动脚本
"""
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

if __name__ == "__main__":
    from src.cli import main

    main()
