"""
Flask 服务主文件
加载一个训练好的排序模型，对外提供检索、评估和问答事实选择接口
"""

from flask import Flask
from flask_cors import CORS

from config import get_config
from routes import qa_bp, reports_bp, retrieval_bp
from utils.logging import setup_logging


def create_app(config_name=None, registry=None):
    """
    应用工厂函数

    Args:
        config_name (str): 配置名，None 时读取 MMRANK_ENV
        registry (ServingRegistry): 服务状态；None 时按配置中的 SERVE_* 路径装配

    Returns:
        Flask: 配置好的 Flask 应用实例
    """
    app = Flask(__name__)
    app.config.from_object(get_config(config_name))
    setup_logging(app.config['LOG_LEVEL'])

    if registry is None:
        registry = build_registry(app.config)
    app.extensions['mmrank'] = registry

    # 前端开发服务器跨域访问
    CORS(app,
         origins=app.config['CORS_ORIGINS'],
         allow_headers=['Content-Type', 'X-Requested-With'],
         methods=['GET', 'POST', 'OPTIONS'])

    app.register_blueprint(retrieval_bp, url_prefix='/api/retrieval')
    app.register_blueprint(qa_bp, url_prefix='/api/qa')
    app.register_blueprint(reports_bp, url_prefix='/api/reports')

    @app.route('/api/health')
    def health_check():
        """
        健康检查接口
        """
        return {
            'status': 'healthy',
            'model': registry.model.KIND,
            'split': registry.split,
        }

    return app


def build_registry(settings):
    """按配置中的路径装配服务状态"""
    from utils.errors import ParameterError
    from utils.serving import ServingRegistry
    if not settings.get('SERVE_MODEL'):
        raise ParameterError('未配置 SERVE_MODEL（MMRANK_SERVE_MODEL），无法启动服务')
    return ServingRegistry.from_paths(
        settings['DATA_DIR'], settings['SERVE_MODEL'], split=settings['SERVE_SPLIT'],
        grounding_dir=settings.get('SERVE_GROUNDING'), vqa_path=settings.get('SERVE_VQA'),
        feature_source=settings['FEATURE_SOURCE'], first_n_images=settings.get('SERVE_FIRST_N_IMAGES'),
        workers=settings.get('SCORE_WORKERS'), prob_floor=settings['PROB_FLOOR'])


if __name__ == '__main__':
    app = create_app()
    app.run(debug=app.config.get('DEBUG', False), host=app.config['SERVER_HOST'], port=app.config['SERVER_PORT'])
