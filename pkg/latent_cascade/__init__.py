"""
latent_cascade

多阶段（级联）VAE、可调解码方差、球面流形恢复实验，以及 SMILES 分布学习评估。
"""

__version__ = "1.0.0"
