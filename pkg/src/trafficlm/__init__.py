"""
trafficlm - A generative pre-trained language model for network traffic.
"""

from .codec import detokenize_flow, tokenize_flow, validate_token_grammar
from .generation import GenerationConfig, generate_flow
from .model import ModelConfig, TrafficLM, build_model, load_checkpoint, save_checkpoint
from .pcap_io import read_pcap, split_flows, write_pcap
from .training import TrainConfig, train

__all__ = [
    'read_pcap',
    'write_pcap',
    'split_flows',
    'tokenize_flow',
    'detokenize_flow',
    'validate_token_grammar',
    'ModelConfig',
    'TrafficLM',
    'build_model',
    'save_checkpoint',
    'load_checkpoint',
    'TrainConfig',
    'train',
    'GenerationConfig',
    'generate_flow',
]
