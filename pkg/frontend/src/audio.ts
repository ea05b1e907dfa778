/**
 * Jitter buffer between network audio messages and the sound card.
 *
 * The service emits fixed-size stereo blocks with strictly increasing
 * sequence numbers. The ring absorbs bursts, refuses stale or replayed
 * blocks, and hands the output callback exactly the frames it asks for,
 * padding with silence on underrun so playback never stalls.
 */

export const CHANNELS = 2;

/** Default capacity: two seconds of 48 kHz stereo. */
export const DEFAULT_CAPACITY_FRAMES = 96_000;

export class PlaybackRing {
  private readonly data: Float32Array;
  private readonly capacity: number;
  private readStart = 0;
  private frames = 0;
  private lastSeq = -1;
  private rejectedBlocks = 0;
  private overwrittenFrames = 0;

  constructor(capacityFrames: number = DEFAULT_CAPACITY_FRAMES) {
    if (!Number.isInteger(capacityFrames) || capacityFrames <= 0) {
      throw new RangeError("ring capacity must be a positive frame count");
    }
    this.capacity = capacityFrames;
    this.data = new Float32Array(capacityFrames * CHANNELS);
  }

  /**
   * Append one block of interleaved stereo samples.
   *
   * Returns false (and counts the block as rejected) when `seq` does not
   * advance, which covers duplicates and reordered arrivals. When the ring
   * is full the oldest frames fall off to make room, keeping playback near
   * the live edge.
   */
  push(seq: number, samples: Float32Array): boolean {
    if (samples.length % CHANNELS !== 0) {
      throw new RangeError("stereo blocks must interleave two channels");
    }
    if (seq <= this.lastSeq) {
      this.rejectedBlocks += 1;
      return false;
    }
    this.lastSeq = seq;
    const incoming = samples.length / CHANNELS;
    const overflow = this.frames + incoming - this.capacity;
    if (overflow > 0) {
      this.readStart = (this.readStart + overflow) % this.capacity;
      this.frames -= overflow;
      this.overwrittenFrames += overflow;
    }
    let writeFrame = (this.readStart + this.frames) % this.capacity;
    for (let i = 0; i < incoming; i += 1) {
      this.data[writeFrame * CHANNELS] = samples[i * CHANNELS];
      this.data[writeFrame * CHANNELS + 1] = samples[i * CHANNELS + 1];
      writeFrame = (writeFrame + 1) % this.capacity;
    }
    this.frames += incoming;
    return true;
  }

  /**
   * Fill `out` (interleaved stereo) from the front of the ring.
   *
   * Returns how many frames carried real samples; the remainder of `out`
   * is zeroed.
   */
  pull(out: Float32Array): number {
    if (out.length % CHANNELS !== 0) {
      throw new RangeError("output buffer must interleave two channels");
    }
    const wanted = out.length / CHANNELS;
    const got = Math.min(wanted, this.frames);
    for (let i = 0; i < got; i += 1) {
      const frame = (this.readStart + i) % this.capacity;
      out[i * CHANNELS] = this.data[frame * CHANNELS];
      out[i * CHANNELS + 1] = this.data[frame * CHANNELS + 1];
    }
    out.fill(0, got * CHANNELS);
    this.readStart = (this.readStart + got) % this.capacity;
    this.frames -= got;
    return got;
  }

  /** Drop everything buffered (e.g. after a seek). */
  clear(): void {
    this.frames = 0;
  }

  get bufferedFrames(): number {
    return this.frames;
  }

  /** Blocks refused for stale or repeated sequence numbers. */
  get dropped(): number {
    return this.rejectedBlocks;
  }

  /** Frames pushed out of a full ring before they were played. */
  get overwritten(): number {
    return this.overwrittenFrames;
  }
}
