export { NetBackend } from './backend.js';
export {
  BackendConfig,
  BackendConfigSchema,
  TrainingConfig,
  TrainingConfigSchema,
  loadConfigFile,
  parseConfig,
} from './config.js';
export { readCorpus, readImagePng, readMaskPng, CorpusSample } from './corpus.js';
export { Checkpoint, SegNet, STRIDE } from './model.js';
export { serveStdio, serveStream, serveTcp, ServeResult } from './serve.js';
export { initBackend } from './tfjs.js';
export { Trainer, TrainResult, fineTune, makeRng, sampleInput, sampleTarget, trainOffline } from './train.js';
export {
  BadFrameError,
  ByteSource,
  ImagePayload,
  TuneSample,
  WireError,
  encodeError,
  encodeFineTuneAck,
  encodeRequest,
  encodeResponse,
  readFineTuneBody,
  readRequestBody,
} from './wire.js';
