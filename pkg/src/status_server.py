#!/usr/bin/env python3
"""
ソルバーデーモンの状態確認用 HTTP サーバー
読み取り専用 (ヘルスチェックと要求統計)
"""

import os
import threading
from typing import Optional

from flask import Flask, jsonify

from solver_daemon import SolverDaemon


def create_status_app(daemon: SolverDaemon) -> Flask:
    """デーモンの状態を返す Flask アプリを作成"""
    app = Flask(__name__)

    @app.route('/health', methods=['GET'])
    def health_check():
        """ヘルスチェック用エンドポイント"""
        solver = daemon.solver
        return jsonify({
            'status': 'ok' if daemon.ready.is_set() else 'starting',
            'service': 'DisPINN Solver Daemon',
            'endpoint': daemon.endpoint_url if daemon.address else None,
            'fom_problem': 'loaded' if solver.problem is not None else 'not_loaded',
            'reduced_system': 'loaded' if solver.reduced is not None else 'not_loaded',
        })

    @app.route('/stats', methods=['GET'])
    def stats():
        """要求統計"""
        try:
            return jsonify(daemon.stats.to_dict())
        except Exception as e:
            return jsonify({'error': str(e)}), 500

    @app.route('/', methods=['GET'])
    def index():
        """ルートエンドポイント"""
        return jsonify({
            'service': 'DisPINN Solver Daemon',
            'endpoints': {
                '/health': 'GET - Health check',
                '/stats': 'GET - Request statistics',
            }
        })

    return app


def start_status_server(daemon: SolverDaemon, port: Optional[int] = None,
                        host: str = '127.0.0.1') -> threading.Thread:
    """状態サーバーをバックグラウンドスレッドで起動"""
    port = port if port is not None else int(os.environ.get('DISPINN_STATUS_PORT', 5000))
    app = create_status_app(daemon)
    thread = threading.Thread(
        target=app.run,
        kwargs={'host': host, 'port': port, 'debug': False, 'use_reloader': False},
        daemon=True,
    )
    thread.start()
    print(f"Status server on http://{host}:{port}/health")
    return thread
