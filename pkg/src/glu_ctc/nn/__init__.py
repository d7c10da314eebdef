from .model import Adam, ModelConfig, init_params, load_checkpoint, loss_and_grads, model_forward, save_checkpoint

__all__ = ["Adam", "ModelConfig", "init_params", "load_checkpoint", "loss_and_grads",
           "model_forward", "save_checkpoint"]
