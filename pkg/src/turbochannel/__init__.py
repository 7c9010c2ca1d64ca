"""turbochannel: a covert-channel laboratory built on core-count turbo scaling.

Layers, bottom up: ``turbo`` models the shared turbo frequency and background
noise, ``phy`` simulates the transmit/sample channel, ``modem`` does on-off
keying with edge detection, ``link`` adds framing, CRC-16, and stop-and-wait
reliability, ``fec`` analyses error-correction trade-offs, and ``harness``
runs seeded experiment scenarios from config files (also via the
``turbochannel`` CLI).
"""

from .fec import (FecModel, PacketOutcome, byte_errors, estimate_goodput,
                  rs_correctable)
from .harness import (Scenario, ScenarioReport, count_frequency_changes,
                      emit_csv, load_scenario, noise_change_histogram,
                      run_scenario, sweep)
from .link import (ACK_BITS, FRAME_BITS, PAYLOAD_BYTES, ArqReceiver, ArqSender,
                   LinkConfig, TransferFailed, TransferStats, crc16,
                   decode_ack, decode_frame, encode_ack, encode_frame,
                   pad_payload, recv_reliable, run_transfer, send_reliable)
from .modem import (SYNC_WORD, BinarySampleStream, ModemConfig, classify,
                    default_threshold, demodulate, find_sync, modulate,
                    reject_glitches)
from .phy import (ChannelEndpoint, SampleSeries, SimulatedChannel, TxSchedule,
                  sample_frequency, transmit)
from .turbo import (ActivityTrace, DomainError, FrequencyTrace, NoiseProfile,
                    TurboPolicy, apply_policy, builtin_policy, generate_noise,
                    merge, turbo_frequency)

__version__ = "0.1.0"
