#!/usr/bin/env python3
"""
.env ファイルから DISPINN_* 環境変数を読み込む
使用方法: from scripts.load_env import load_env; load_env()

対象: DISPINN_SOLVER, DISPINN_LOG_LEVEL, DISPINN_STATUS_PORT
"""
import os
from pathlib import Path
from typing import Dict, Optional

PREFIX = "DISPINN_"


def parse_env_line(line: str) -> Optional[tuple]:
    """KEY=VALUE 形式の 1 行を解析 (コメント行、空行は None)"""
    line = line.strip()
    if not line or line.startswith('#') or '=' not in line:
        return None
    key, value = line.split('=', 1)
    value = value.strip()
    if len(value) >= 2 and value[0] == value[-1] and value[0] in ('"', "'"):
        value = value[1:-1]
    return key.strip(), value


def load_env(env_file: Optional[Path] = None, quiet: bool = True) -> Dict[str, str]:
    """
    プロジェクトルートの .env から DISPINN_ で始まる変数だけを読み込む

    既に環境に設定されている変数は上書きしない。

    Returns:
        新たに設定した変数
    """
    env_file = env_file or Path(__file__).parent.parent / '.env'
    loaded: Dict[str, str] = {}
    if not env_file.exists():
        return loaded

    with open(env_file, 'r', encoding='utf-8') as f:
        for line_num, line in enumerate(f, 1):
            parsed = parse_env_line(line)
            if parsed is None:
                continue
            key, value = parsed
            if not key.startswith(PREFIX):
                if not quiet:
                    print(f"Ignoring {key} at line {line_num} (not a {PREFIX}* variable)")
                continue
            if key in os.environ:
                continue
            os.environ[key] = value
            loaded[key] = value

    if loaded and not quiet:
        print(f"Loaded {', '.join(sorted(loaded))} from {env_file}")
    return loaded


if __name__ == "__main__":
    load_env(quiet=False)
