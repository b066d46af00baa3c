/** Wire types mirroring the control service payloads. */

export type NodeKind =
  | "choice_node"
  | "control_node"
  | "choice_control_node"
  | "regular_node";

export type ServiceStatus = "inactive" | "pending" | "active";

export type StrategyLevelName =
  | "inform_traffic"
  | "enlarge_outflow"
  | "reduce_inflow"
  | "reroute_traffic";

export const LEVELS: StrategyLevelName[] = [
  "inform_traffic",
  "enlarge_outflow",
  "reduce_inflow",
  "reroute_traffic",
];

export interface NetworkNode {
  id: string;
  kind: NodeKind;
  x: number;
  y: number;
  label?: string;
}

export interface NetworkEdge {
  id: string;
  from: string;
  to: string;
  length: number;
  capacity: number;
  free_flow_speed: number;
  lanes: number;
}

export interface ControlSegment {
  id: string;
  member_links: string[];
  base_capacity: number;
  boost_capacity: number;
}

export interface RoutePart {
  id: string;
  from_choice: string;
  to_choice: string;
  member_links: string[];
  alternatives: string[];
}

export interface NetworkDoc {
  nodes: NetworkNode[];
  edges: NetworkEdge[];
  control_segments: ControlSegment[];
  route_parts: RoutePart[];
}

export interface ServiceInfo {
  id: string;
  name: string;
  category: string;
  contributions: StrategyLevelName[];
  applicable_elements: string[];
  bundled_for: string[];
  deployment_scale: string;
  control_mode: "direct_operator" | "via_provider";
  tm_suitable: boolean;
  indirect: boolean;
  in_area: boolean;
  status: ServiceStatus;
}

export interface LinkState {
  link: string;
  vehicles_on_link: number;
  queue: number;
  inflow: number;
  outflow: number;
  effective_capacity: number;
  mean_speed: number;
}

export interface BottleneckInfo {
  problem: string;
  element: string;
  bottleneck_kind: string;
  severity: number;
  measure?: number;
  threshold?: number;
  primary_cause: string | null;
}

export type ActivationPair = [service: string, element: string];

export interface StrategyPayload {
  strategy: string;
  problem: string;
  level: StrategyLevelName;
  status: string;
  created_by: string;
  activations: ActivationPair[];
  preferred_situation: string;
  activated?: ActivationPair[];
  withheld?: ActivationPair[];
  situation?: { streak: number; met: boolean };
  forced?: boolean;
  standing?: boolean;
}

export interface PendingDecisionInfo {
  id: string;
  key: string;
  service_a: string;
  service_b: string;
  element: string;
  strategy_id: string;
  status: "open" | "decided" | "expired";
  choice: string | null;
}

export interface KpiReport {
  total_delay_veh_h: number;
  throughput: number;
  mode_shifted: number;
  mean_queue: number;
  max_queue: number;
  strategy_activations?: Record<string, number>;
  [extra: string]: unknown;
}

export interface StateView {
  tick: number;
  on_network: number;
  created: number;
  completed: number;
  links: LinkState[];
  bottlenecks: BottleneckInfo[];
  strategies: StrategyPayload[];
  pending_decisions: PendingDecisionInfo[];
  services: Record<string, ServiceStatus>;
  prompts: { tick: number; source: string; prompt: string }[];
  kpis: KpiReport;
}

export type EventKind =
  | "StateSnapshot"
  | "BottleneckDetected"
  | "StrategyProposed"
  | "StrategyActivated"
  | "StrategyRetired"
  | "PendingDecision"
  | "MessageLifecycle"
  | "KpiUpdate";

export interface EngineEvent {
  tick: number;
  seq: number;
  kind: EventKind;
  payload: Record<string, unknown>;
}

export interface MessageLifecyclePayload {
  tick: number;
  stage: "dispatched" | "forwarded" | "delivered" | "dropped" | "dead_letter";
  message: string;
  service: string;
  element: string;
  action: "activate" | "deactivate";
  strategy: string;
  control_mode?: "direct_operator" | "via_provider";
  gateway?: string;
  agent?: string;
  reason?: string;
}

export interface SnapshotPayload {
  on_network: number;
  created: number;
  completed: number;
  total_queue: number;
  max_queue: number;
  queues: Record<string, number>;
}

export interface CommandOk {
  ok: true;
  [field: string]: unknown;
}

export interface CommandErr {
  ok: false;
  error: string;
}

export type CommandResult = CommandOk | CommandErr;

export interface ComposeResult extends CommandOk {
  strategy: string | null;
  level: StrategyLevelName;
  activations: ActivationPair[];
}

export interface ActivateResult extends CommandOk {
  strategy: string;
  activated: ActivationPair[];
  withheld: ActivationPair[];
  pending_decisions: string[];
}

export interface ShiftResult extends CommandOk {
  strategy: string;
  replaces: string;
  level: StrategyLevelName;
  activated: ActivationPair[];
  pending_decisions: string[];
}
