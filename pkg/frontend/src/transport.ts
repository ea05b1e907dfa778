/**
 * Browser transport: the render service speaks its framed messages inside
 * binary WebSocket frames, so this is a thin adapter from the WebSocket
 * event API onto the session's Transport interface.
 */

import type { Transport } from "./session.js";

export class WebSocketTransport implements Transport {
  private dataHandler: (chunk: Uint8Array) => void = () => {};
  private closeHandler: () => void = () => {};

  private constructor(private readonly socket: WebSocket) {
    socket.binaryType = "arraybuffer";
    socket.onmessage = (event: MessageEvent) => {
      if (event.data instanceof ArrayBuffer) {
        this.dataHandler(new Uint8Array(event.data));
      }
    };
    socket.onclose = () => this.closeHandler();
    socket.onerror = () => this.closeHandler();
  }

  /** Connect and resolve once the socket is open and ready to send. */
  static connect(url: string): Promise<WebSocketTransport> {
    return new Promise((resolve, reject) => {
      const socket = new WebSocket(url);
      socket.onopen = () => resolve(new WebSocketTransport(socket));
      socket.onerror = () => reject(new Error(`websocket connect failed: ${url}`));
    });
  }

  send(data: Uint8Array): void {
    this.socket.send(data);
  }

  close(): void {
    this.socket.close();
  }

  onData(handler: (chunk: Uint8Array) => void): void {
    this.dataHandler = handler;
  }

  onClose(handler: () => void): void {
    this.closeHandler = handler;
  }
}
